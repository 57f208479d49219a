"""Run configuration files: flat ``key = value`` text with ``#`` comments."""

import logging
from datetime import date
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Type

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from schema.errors import ConfigError
from schema.models import ModelSpec, PriorSettings, SamplerConfig, ScenarioSpec
from schema.results import PredictionMode

logger = logging.getLogger(__name__)

SPEC_KEYS = [
    "endpoint_mode",
    "sharing",
    "sharing_psi",
    "tie_mixture_probabilities",
    "common_effect_within_indication",
    "p_new",
]
PRIOR_KEYS = list(PriorSettings.model_fields)
SAMPLER_KEYS = list(SamplerConfig.model_fields)
RUN_KEYS = ["include_psi", "prediction_mode", "snapshot", "exclude_indication", "split_rhat", "write_draws"]


def parse_key_values(text: str) -> Dict[str, Tuple[int, Any]]:
    """Split config text into ``{key: (line number, raw value)}``.

    Values containing commas become lists of stripped strings; pydantic does
    the type coercion afterwards.
    """
    entries: Dict[str, Tuple[int, Any]] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got '{line}'", line=number)
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError("missing key", line=number)
        if key in entries:
            raise ConfigError(f"duplicate key '{key}'", line=number)
        if "," in value:
            value = [item.strip() for item in value.split(",")]
        entries[key] = (number, value)
    return entries


def _validate(model: Type[BaseModel], entries: Dict[str, Tuple[int, Any]], keys: List[str], **extra) -> BaseModel:
    fields = {key: entries[key][1] for key in keys if key in entries}
    try:
        return model(**fields, **extra)
    except ValidationError as e:
        error = e.errors()[0]
        key = str(error["loc"][0]) if error["loc"] else ""
        line = entries[key][0] if key in entries else None
        message = error["msg"] if not key else f"invalid value for '{key}': {error['msg']}"
        raise ConfigError(message, line=line) from None


def _render(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(_render(item) for item in value)
    if isinstance(value, date):
        return value.isoformat()
    return str(value)


class RunConfig(BaseModel):
    """Parsed run configuration: model, sampler and run-level switches."""
    model_config = ConfigDict(frozen=True)

    spec: ModelSpec = Field(default_factory=ModelSpec)
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)
    include_psi: bool = False
    prediction_mode: Literal["matched", "ip-pfs"] = "matched"
    snapshot: Optional[date] = None
    exclude_indication: Optional[str] = None
    split_rhat: bool = False
    write_draws: bool = False

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        entries = parse_key_values(text)
        known = set(SPEC_KEYS) | set(PRIOR_KEYS) | set(SAMPLER_KEYS) | set(RUN_KEYS)
        for key, (line, _) in entries.items():
            if key not in known:
                raise ConfigError(f"unknown key '{key}'", line=line)

        priors = _validate(PriorSettings, entries, PRIOR_KEYS)
        spec = _validate(ModelSpec, entries, SPEC_KEYS, priors=priors)
        sampler = _validate(SamplerConfig, entries, SAMPLER_KEYS)
        fields = {key: entries[key][1] for key in RUN_KEYS if key in entries}
        try:
            return cls(spec=spec, sampler=sampler, **fields)
        except ValidationError as e:
            key = str(e.errors()[0]["loc"][0])
            raise ConfigError(f"invalid value for '{key}': {e.errors()[0]['msg']}", line=entries[key][0]) from None

    @classmethod
    def load(cls, path: Optional[str | Path]) -> "RunConfig":
        """Read a configuration file; ``None`` gives the built-in defaults."""
        if path is None:
            return cls()
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read configuration file '{path}': {e.strerror}") from None
        config = cls.from_text(text)
        logger.info(f"Loaded run configuration from {path}")
        return config

    def to_text(self) -> str:
        """Render every set key, so the text alone reproduces the configuration."""
        spec = self.spec
        values: Dict[str, Any] = {key: getattr(spec, key) for key in SPEC_KEYS}
        values.update({key: getattr(spec.priors, key) for key in PRIOR_KEYS})
        values.update({key: getattr(self.sampler, key) for key in SAMPLER_KEYS})
        values.update({key: getattr(self, key) for key in RUN_KEYS})
        return "".join(f"{key} = {_render(value)}\n" for key, value in values.items() if value is not None)

    def override(self, spec: Optional[Dict[str, Any]] = None, sampler: Optional[Dict[str, Any]] = None, **run) -> "RunConfig":
        """Apply command-line overrides, revalidating the touched models."""
        spec_fields = {key: value for key, value in (spec or {}).items() if value is not None}
        sampler_fields = {key: value for key, value in (sampler or {}).items() if value is not None}
        run_fields = {key: value for key, value in run.items() if value is not None}
        try:
            new_spec = ModelSpec(**{**self.spec.model_dump(), **spec_fields}) if spec_fields else self.spec
            new_sampler = SamplerConfig(**{**self.sampler.model_dump(), **sampler_fields}) if sampler_fields else self.sampler
            return RunConfig(**{**self.model_dump(exclude={"spec", "sampler"}), **run_fields, "spec": new_spec, "sampler": new_sampler})
        except ValidationError as e:
            error = e.errors()[0]
            raise ConfigError(f"invalid option '{'.'.join(map(str, error['loc']))}': {error['msg']}") from None

    @property
    def mode(self) -> PredictionMode:
        return PredictionMode.MATCHED if self.prediction_mode == "matched" else PredictionMode.IP_PFS


def load_scenario(path: str | Path) -> ScenarioSpec:
    """Read a synthetic scenario in the same key-value format."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read scenario file '{path}': {e.strerror}") from None
    entries = parse_key_values(text)
    for key, (line, _) in entries.items():
        if key not in ScenarioSpec.model_fields:
            raise ConfigError(f"unknown scenario key '{key}'", line=line)
    return _validate(ScenarioSpec, entries, list(ScenarioSpec.model_fields))
