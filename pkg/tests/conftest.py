import pytest
from hypothesis import HealthCheck, settings

from cansim._kernels import warmup

settings.register_profile(
    "cansim",
    derandomize=True,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("cansim")


@pytest.fixture(scope="session", autouse=True)
def _warm_kernels():
    # JIT-compile (or no-op on the python backend) before any timed test
    warmup()
