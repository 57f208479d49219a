"""Global test configuration."""

import logging
import os
import sys

import pytest

# Add src to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '../src'))
sys.path.insert(0, os.path.dirname(os.path.dirname(__file__)))

from config.config import settings  # noqa: E402
from schema.models import SamplerConfig  # noqa: E402


@pytest.fixture(autouse=True)
def no_log_files(monkeypatch):
    """Keep rotating log files out of the working tree and restore root handlers after CLI runs.

    Chains run on threads unless a test asks for worker processes.
    """
    monkeypatch.setattr(settings, "log_to_file", False)
    monkeypatch.setattr(settings, "chain_executor", "thread")
    root = logging.getLogger()
    handlers, level = list(root.handlers), root.level
    yield
    root.handlers = handlers
    root.setLevel(level)


@pytest.fixture
def fast_config() -> SamplerConfig:
    """Short chains for behavioural tests; statistical tolerances are scaled to match."""
    return SamplerConfig(n_chains=2, burn_in=300, samples_per_chain=1500, seed=20240)


@pytest.fixture
def tiny_config() -> SamplerConfig:
    """Minimal chains for tests that refit many times."""
    return SamplerConfig(n_chains=2, burn_in=100, samples_per_chain=200, seed=7)
