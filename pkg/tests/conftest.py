import os

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def zeta_ref():
    """The cached default sample of the limit variable (1e6 draws, K = 1e4, seed 0)."""
    from chandetect.zeta import default_distribution

    return default_distribution()


@pytest.fixture
def out_env(tmp_path, monkeypatch):
    monkeypatch.delenv("CHANDETECT_OUTPUT_DIR", raising=False)
    return tmp_path
