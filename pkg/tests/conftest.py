import numpy as np
import pytest
from hypothesis import HealthCheck, settings

# First calls into the compiled kernels pay JIT cost; keep hypothesis from
# flagging them as flaky-slow.
settings.register_profile(
    "qstore",
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("qstore")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
