"""Configuration management for the meta-analysis toolkit."""

from typing import Literal

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Process-level settings, read from ``MIMA_*`` environment variables."""

    model_config = SettingsConfigDict(
        env_prefix="MIMA_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    # Logging configuration
    log_dir: str = Field(default="logs")
    log_level: str = Field(default="INFO")
    log_to_file: bool = Field(default=True)

    # Worker pools (0 means "one per task")
    chain_workers: int = Field(default=0, ge=0)
    replication_workers: int = Field(default=0, ge=0)
    # "process" runs chains in worker processes; "thread" keeps them in-process
    chain_executor: Literal["process", "thread"] = Field(default="process")

    # Output
    float_format: str = Field(default="%.10g")
    write_draws: bool = Field(default=False)

    # Quadrature oracle
    grid_nodes: int = Field(default=401, ge=401)


# Global settings instance
settings = Settings()
