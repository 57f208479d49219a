"""Performance test configuration and fixtures."""

import os
import sys

import pytest

# Add src to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '../../src'))

from schema.models import ScenarioSpec, SamplerConfig  # noqa: E402
from services.synthetic import generate  # noqa: E402


@pytest.fixture(scope="session")
def performance_test_config():
    """Configuration for performance tests."""
    return {
        'sweeps': 500,
        'max_seconds_per_1k_sweeps': 5.0,
        'default_run_budget_seconds': 10.0,
    }


@pytest.fixture(scope="session")
def synthetic_evidence():
    """Four indications, four dual-endpoint trials each."""
    evidence, _ = generate(ScenarioSpec(seed=2024))
    return evidence


@pytest.fixture
def sweep_config(performance_test_config) -> SamplerConfig:
    return SamplerConfig(n_chains=1, burn_in=0, samples_per_chain=performance_test_config['sweeps'], seed=1)
