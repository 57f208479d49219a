import logging
import os
import sys
from concurrent_log_handler import ConcurrentRotatingFileHandler
from config.config import settings
from contextvars import ContextVar

# Used to store run_id in contextvars
run_id_ctx_var: ContextVar[str] = ContextVar("run_id", default="MIMA")


# Custom Formatter to handle missing attributes
class RunIDFormatter(logging.Formatter):
    def format(self, record):
        if not hasattr(record, "run_id"):
            record.run_id = run_id_ctx_var.get()
        return super().format(record)


# Log filter to add run_id to records
class RunIDLogFilter(logging.Filter):
    def filter(self, record):
        record.run_id = run_id_ctx_var.get()
        return True


def _rotating_handler(path: str, level: int, formatter: logging.Formatter, only_level: bool):
    handler = ConcurrentRotatingFileHandler(
        path,
        mode="a",
        maxBytes=5 * 1024 * 1024,
        backupCount=30,
        encoding="utf-8",
    )
    handler.setLevel(level)
    handler.setFormatter(formatter)
    handler.addFilter(RunIDLogFilter())
    if only_level:
        handler.addFilter(lambda record: record.levelno == level)
    return handler


def setup_logger(log_dir: str | None = None, to_file: bool | None = None) -> None:
    """Configure the root logger for one CLI invocation.

    Console output goes to stderr; stdout carries command results.
    """
    logger = logging.getLogger()
    logger.setLevel(getattr(logging, settings.log_level.upper(), logging.INFO))

    formatter = RunIDFormatter(
        "%(asctime)s - %(name)s - %(levelname)s - [%(run_id)s] - %(message)s - %(filename)s:%(lineno)d"
    )

    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(logging.DEBUG)
    console_handler.setFormatter(formatter)
    console_handler.addFilter(RunIDLogFilter())

    handlers: list[logging.Handler] = []
    if settings.log_to_file if to_file is None else to_file:
        log_dir = log_dir or settings.log_dir
        if not os.path.exists(log_dir):
            os.makedirs(log_dir)

        handlers = [
            _rotating_handler(os.path.join(log_dir, "sys.log"), logging.INFO, formatter, False),
            _rotating_handler(os.path.join(log_dir, "info.log"), logging.INFO, formatter, True),
            _rotating_handler(os.path.join(log_dir, "warn.log"), logging.WARNING, formatter, True),
            _rotating_handler(os.path.join(log_dir, "error.log"), logging.ERROR, formatter, True),
        ]

    # Clear existing handlers and add ours
    logger.handlers = handlers + [console_handler]
