import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bilevel_lb.tridiag import (
    C_HIGH, C_LOW, SingularSystemError, build_laplacian, resolvent_last_column, spectral_basis,
    thomas_solve,
)


def test_laplacian_shape():
    a = build_laplacian(4).dense()
    np.testing.assert_array_equal(a, [[1, -1, 0, 0], [-1, 2, -1, 0], [0, -1, 2, -1], [0, 0, -1, 1]])
    assert build_laplacian(1).dense().tolist() == [[0.0]]
    with pytest.raises(ValueError):
        build_laplacian(0)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 40), st.floats(1e-4, 10), st.integers(0, 2**31))
def test_thomas_matches_dense_inverse(n, shift, seed):
    b = np.random.default_rng(seed).standard_normal(n)
    m = build_laplacian(n)
    y = thomas_solve(m, shift, b)
    ref = np.linalg.solve(m.dense() + shift * np.eye(n), b)
    np.testing.assert_allclose(y, ref, rtol=1e-9, atol=1e-11)


def test_thomas_backends(backend, rng):
    m = build_laplacian(9)
    b = rng.standard_normal(9)
    np.testing.assert_allclose(thomas_solve(m, 0.5, b), np.linalg.solve(m.dense() + 0.5 * np.eye(9), b), rtol=1e-12)


def test_singular_system():
    with pytest.raises(SingularSystemError):
        thomas_solve(build_laplacian(5), 0.0, np.ones(5))


def test_rhs_shape():
    with pytest.raises(ValueError):
        thomas_solve(build_laplacian(3), 1.0, np.ones(4))


@pytest.mark.parametrize("n", [1, 2, 3, 8, 31])
def test_spectral_basis(n):
    sb = spectral_basis(n)
    Q = sb.matrix()
    np.testing.assert_allclose(Q.T @ Q, np.eye(n), atol=1e-12)
    np.testing.assert_allclose(build_laplacian(n).dense() @ Q, Q * sb.eigenvalues, atol=1e-12)
    assert sb.eigenvalues[0] == 0.0


def test_resolvent_n2():
    # (A + I/4)^{-1} e_2 = (16/9, 20/9)
    np.testing.assert_allclose(resolvent_last_column(2).values, [16 / 9, 20 / 9], rtol=1e-14)


@pytest.mark.parametrize("n", [1, 2, 5, 17, 64])
def test_resolvent_against_spectral_sum(n):
    sb = spectral_basis(n)
    j = np.arange(1, n + 1)
    ref = sum(sb.q(k, j) * sb.q(k, n) / (sb.eigenvalues[k - 1] + 1 / n**2) for k in range(1, n + 1))
    np.testing.assert_allclose(resolvent_last_column(n).values, ref, rtol=1e-10)


def test_resolvent_n7_lower_bound():
    s = resolvent_last_column(7)
    assert s.s_1n >= C_LOW * 7
    assert C_LOW * 7 == pytest.approx(1.2428, abs=1e-4)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 300))
def test_resolvent_envelope(n):
    v = resolvent_last_column(n).values
    assert C_LOW * n < v[0] and v[-1] < C_HIGH * n
    assert np.all(np.diff(v) > 0)


def test_constants():
    assert C_LOW == pytest.approx(1 - math.pi**2 / 12)
    assert C_HIGH == pytest.approx(1 + math.pi**2 / 12)
