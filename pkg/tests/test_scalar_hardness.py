import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from bilevel_lb.scalar_hardness import (
    PHI_LIMIT, PSI1_LIMIT, SupTable, certify_sups, phi, phi_d, psi, psi_d,
)


def test_psi_values(backend):
    assert psi(1.0) == pytest.approx(1.0, rel=1e-15)
    assert psi(0.5) == 0.0
    assert psi(-1.0) == 0.0
    assert psi(0.0) == 0.0
    assert psi_d(0.3, 1) == 0.0 and psi_d(0.3, 2) == 0.0


def test_phi_at_zero(backend):
    assert phi(0.0) == pytest.approx(math.sqrt(math.pi * math.e / 2), rel=1e-14)


@pytest.mark.parametrize("x", [-6.0, -1.3, 0.0, 0.7, 2.5, 7.0])
def test_phi_against_quadrature(backend, x):
    ref = math.sqrt(math.e) * quad(lambda t: math.exp(-t * t / 2), -np.inf, x, epsabs=1e-14)[0]
    assert phi(x) == pytest.approx(ref, rel=1e-10, abs=1e-14)


@pytest.mark.parametrize("x", [0.55, 0.8, 1.0, 1.7, 3.0])
def test_psi_derivatives_by_differences(backend, x):
    h = 1e-6
    d1 = (psi(x + h) - psi(x - h)) / (2 * h)
    d2 = (psi_d(x + h, 1) - psi_d(x - h, 1)) / (2 * h)
    assert psi_d(x, 1) == pytest.approx(d1, rel=1e-6, abs=1e-9)
    assert psi_d(x, 2) == pytest.approx(d2, rel=1e-6, abs=1e-8)


@pytest.mark.parametrize("x", [-3.0, -0.4, 0.0, 1.1, 2.9])
def test_phi_derivatives_by_differences(backend, x):
    h = 1e-6
    assert phi_d(x, 1) == pytest.approx((phi(x + h) - phi(x - h)) / (2 * h), rel=1e-7)
    assert phi_d(x, 2) == pytest.approx((phi_d(x + h, 1) - phi_d(x - h, 1)) / (2 * h), rel=1e-6, abs=1e-9)


def test_array_shape_preserved():
    x = np.linspace(-2, 2, 12).reshape(3, 4)
    assert psi(x).shape == (3, 4)
    assert phi_d(x, 2).shape == (3, 4)


def test_bad_order():
    with pytest.raises(ValueError):
        psi_d(1.0, 3)
    with pytest.raises(ValueError):
        phi_d(1.0, 0)


@settings(max_examples=200, deadline=None)
@given(st.floats(-50, 50, allow_nan=False))
def test_envelopes_hold(x):
    assert 0.0 <= psi(x) < math.e
    assert 0.0 <= phi(x) <= PHI_LIMIT
    assert 0.0 <= psi_d(x, 1) <= PSI1_LIMIT * (1 + 1e-12)
    assert 0.0 <= phi_d(x, 1) <= math.sqrt(math.e)


@settings(max_examples=100, deadline=None)
@given(st.floats(-10, 10), st.floats(1e-3, 5))
def test_monotone(x, dx):
    assert phi(x + dx) >= phi(x)
    assert psi(x + dx) >= psi(x)


def test_sup_table_values():
    t = certify_sups(1e-5)
    # frozen from a 1e-5 grid scan; |psi'| peaks where (2x-1)^2 = 2/3
    assert t.sup_psi1 == pytest.approx(math.sqrt(54 / math.e), rel=1e-9)
    assert t.sup_psi2 == pytest.approx(32.3866, rel=1e-5)
    assert t.sup_phi1 == pytest.approx(math.sqrt(math.e), rel=1e-15)
    assert t.sup_phi2 == pytest.approx(1.0, rel=1e-15)
    assert 2.70 < t.sup_psi < math.e
    b = t.bounds()
    assert b["psi"] == math.e and b["phi"] == PHI_LIMIT
    assert b["psi1"] == pytest.approx(PSI1_LIMIT)
    assert b["psi2"] == pytest.approx(1.1 * t.sup_psi2)
    assert b["phi2"] == pytest.approx(1.1)


def test_sup_table_is_cached_and_frozen():
    a = certify_sups(1e-5)
    assert certify_sups(1e-5) is a
    with pytest.raises(Exception):
        a.sup_psi = 0.0
    assert isinstance(a, SupTable)


def test_coarse_grid_rejected():
    with pytest.raises(ValueError):
        certify_sups(1e-3)
    with pytest.raises(ValueError):
        certify_sups(0.0)
