import numpy as np
import pytest

from bilevel_lb import _kernels
from bilevel_lb._accel import HAVE_NUMBA
from bilevel_lb.instance import FunctionClassParams, derive_params

BACKEND_NAMES = ["numba", "numpy"] if HAVE_NUMBA else ["numpy"]
KERNEL_NAMES = ("psi_family", "phi_family", "chain_terms", "chain_hess", "thomas", "laplacian_blocks")


@pytest.fixture(params=BACKEND_NAMES)
def backend(request, monkeypatch):
    """Route every kernel call through one backend for the duration of a test."""
    for name in KERNEL_NAMES:
        monkeypatch.setattr(_kernels, name, _kernels.BACKENDS[request.param][name])
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def canon():
    """L_f=1, L_g=100, mu=1, Delta=1, eps=0.1: n = 4."""
    return derive_params(FunctionClassParams(1.0, 100.0, 1.0, 1.0, 0.1), "det")


@pytest.fixture(scope="session")
def small_det():
    """n = 3, T = 4."""
    return derive_params(FunctionClassParams(1.0, 40.0, 1.0, 10.0, 0.36), "det")


@pytest.fixture(scope="session")
def small_stoc():
    """n = 3, T = 4 stochastic instance with p = 0.3."""
    base = derive_params(FunctionClassParams(1.0, 40.0, 1.0, 10.0, 0.18, 1.0), "stoc")
    sigma = float(np.sqrt(base.c3 * 40.0**2 * base.lam**2 / 0.3))
    return derive_params(FunctionClassParams(1.0, 40.0, 1.0, 10.0, 0.18, sigma), "stoc")
