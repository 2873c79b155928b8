import pytest

from lptml import _kernels


@pytest.fixture(scope="session", autouse=True)
def _warm_kernels():
    # pay the JIT cost once, before anything is timed
    _kernels.warmup()
