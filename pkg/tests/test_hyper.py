import math
from dataclasses import replace

import numpy as np
import pytest

from bilevel_lb.hyper import (
    analytic_floor, composed_value, gap_bound, hyper_eval, hyper_grad, hyper_hess, hyper_value,
    lemma_grad_lower_bound, lower_level_residual, lower_level_solution, projected_mapping,
    stationarity,
)
from bilevel_lb.instance import FunctionClassParams, derive_params
from bilevel_lb.scalar_hardness import phi
from bilevel_lb.verifier import fd_hypergrad_error, lh_power_estimate


def test_lower_level_zero_x(canon):
    y = lower_level_solution(canon, np.zeros(canon.T))
    np.testing.assert_allclose(y[0], canon.x0 * canon.M_col)
    assert not y[1:].any()


def test_lower_level_n2():
    pr = derive_params(FunctionClassParams(1.0, 20.0, 1.0, 10.0, 0.1), "det")
    x = np.zeros(pr.T)
    x[0] = 1.0
    y = lower_level_solution(pr, x)
    np.testing.assert_allclose(y[1], 17 / 4 * np.array([16 / 9, 20 / 9]), rtol=1e-13)


def test_lower_level_residual(canon, rng, backend):
    for _ in range(100):
        x = rng.uniform(-5, 5, canon.T) * canon.x0
        assert lower_level_residual(canon, x) <= 1e-9 * canon.fc.L_g * (np.abs(x).max() + canon.x0)


def test_hyper_at_zero(canon, backend):
    ev = hyper_eval(canon, np.zeros(canon.T))
    assert ev.H == pytest.approx(-canon.scale * phi(0.0), rel=1e-13)
    assert ev.H <= 0
    assert ev.gradH[0] == pytest.approx(-canon.grad_scale * math.sqrt(math.e), rel=1e-12)
    assert abs(ev.gradH[0]) >= canon.grad_scale
    assert ev.stationarity_det >= canon.fc.eps


def test_hyper_matches_composition(canon, rng, backend):
    for _ in range(1000):
        x = rng.uniform(-3, 3, canon.T) * canon.x0
        assert hyper_value(canon, x) == pytest.approx(composed_value(canon, x), rel=1e-10, abs=1e-14)


def test_hypergradient_finite_differences(canon, rng, backend):
    for _ in range(100):
        x = rng.uniform(-3, 3, canon.T) * canon.x0
        assert fd_hypergrad_error(canon, x, hyper_grad(canon, x)[1]) <= 1e-6


def test_hyper_hessian(canon, rng):
    x = rng.uniform(-2, 2, canon.T) * canon.x0
    d, o = hyper_hess(canon, x)
    dense = np.diag(d) + np.diag(o, 1) + np.diag(o, -1)
    h = 1e-6 * canon.x0
    for k in range(canon.T):
        e = np.zeros(canon.T)
        e[k] = h
        col = (hyper_grad(canon, x + e)[1] - hyper_grad(canon, x - e)[1]) / (2 * h)
        np.testing.assert_allclose(dense[:, k], col, atol=1e-5 * canon.L_h)
    assert np.abs(dense).sum(axis=1).max() <= canon.L_h


def test_power_iteration_bounded_by_lh(canon, rng):
    for _ in range(5):
        x = rng.uniform(-3, 3, canon.T) * canon.x0
        assert lh_power_estimate(canon, x, rng) <= canon.L_h


def test_lemma_witness(canon, rng):
    assert lemma_grad_lower_bound(canon, np.zeros(canon.T)) == (True, 1)
    x = np.zeros(canon.T)
    x[:3] = 2 * canon.x0
    assert lemma_grad_lower_bound(canon, x) == (True, 4)
    for _ in range(50):
        x = rng.uniform(-0.9, 0.9, canon.T) * canon.x0
        holds, j = lemma_grad_lower_bound(canon, x)
        assert holds and j == 1


def test_lemma_all_large(canon):
    with pytest.raises(ValueError, match="all coordinates large"):
        lemma_grad_lower_bound(canon, np.full(canon.T, 2 * canon.x0))


def test_gap_bound(canon):
    gb = gap_bound(canon, starts=8)
    assert gb.H0 <= 0
    assert gb.analytic_floor >= gb.lower
    assert gb.descent_inf >= gb.analytic_floor
    assert gb.H0 - gb.analytic_floor <= gb.bound


def test_gap_scales_with_lambda(canon):
    big = replace(canon, lam=2 * canon.lam, x0=2 * canon.x0)
    h0 = hyper_value(canon, np.zeros(canon.T))
    assert hyper_value(big, np.zeros(big.T)) == pytest.approx(4 * h0, rel=1e-12)
    assert analytic_floor(big) == pytest.approx(4 * analytic_floor(canon), rel=1e-12)


def test_stationarity_zero_gradient(canon, small_stoc):
    x = np.zeros(canon.T)
    assert projected_mapping(canon, x, np.zeros(canon.T)) == 0.0
    assert projected_mapping(small_stoc, np.zeros(small_stoc.T), np.zeros(small_stoc.T)) == 0.0


def test_stochastic_stationarity_at_zero(small_stoc):
    pr = small_stoc
    val = stationarity(pr, np.zeros(pr.T))
    assert val >= pr.c2 * pr.fc.L_f * pr.n * pr.lam / pr.L_const
    ev = hyper_eval(pr, np.zeros(pr.T))
    assert 0 <= ev.stationarity_proj <= ev.stationarity_det + 1e-12


def test_projected_mapping_corner_is_stationary(small_stoc):
    pr = small_stoc
    x = np.full(pr.T, pr.x_radius)
    assert stationarity(pr, x) == 0.0
    assert stationarity(pr, x, mode="det") > 0.0
