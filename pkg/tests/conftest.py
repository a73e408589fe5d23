import numpy as np
import pytest

from sdmcran.core import RandomStream


@pytest.fixture
def stream():
    return RandomStream(1234, ("tests",))


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running statistical or pipeline test")
    config.addinivalue_line("markers", "fullscale: optional full-size reproduction, skipped unless enabled")


def mc_acf(z, lags):
    """Empirical autocovariance of a zero-mean sequence along the last axis."""
    z = np.asarray(z)
    n = z.shape[-1]
    return np.array([np.mean(z[..., l:] * np.conj(z[..., : n - l])).real for l in lags])
