import numpy as np
import pytest

from dprisk.core import SeedSpec
from dprisk.fixtures import build_environment


@pytest.fixture
def seed():
    return SeedSpec(7)


@pytest.fixture
def mixture_exact():
    # A = 1, B = 1 with the noise switched off
    return build_environment("mixture", dict(sigma1=0.0, sigma2=0.0))


@pytest.fixture
def pricing_exact():
    return build_environment("pricing", dict(cov_scale=0.0))


def assert_vec(actual, expected, tol=1e-12):
    np.testing.assert_allclose(np.asarray(actual, dtype=float), np.asarray(expected, dtype=float), atol=tol, rtol=0)
