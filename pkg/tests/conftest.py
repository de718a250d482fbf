import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from memedit.memory import LayerMemory, random_psd

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def random_layer(rng, d0=None, d1=None, ridge=None, rank=None):
    """Random covariance layer; the covariance may be rank deficient."""
    d0 = d0 or int(rng.integers(1, 33))
    d1 = d1 or int(rng.integers(1, 33))
    rank = int(rng.integers(0, d0 + 1)) if rank is None else rank
    ridge = float(rng.choice([0.1, 1.0, 10.0])) if ridge is None else ridge
    return LayerMemory(rng.standard_normal((d1, d0)), rng.standard_normal(d0),
                       random_psd(rng, d0, rank=rank, scale=float(rng.uniform(0.1, 10.0))), ridge)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS, key=lambda s: int(s.split("]")[1].split(".")[0])):
            terminalreporter.write_line(line)
