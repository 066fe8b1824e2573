"""
Closed-form lower-level solution and the hyper-objective H(x) = f(x, y*(x)).

Because the lower level is quadratic, y*(x) is linear in x and H reduces to a
one-dimensional chain in x. Gradients come from that chain directly; the
composition f(x, y*(x)) is only used as a consistency oracle.
"""
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from . import _kernels
from .instance import BilevelPoint, eval_f, grad_g, normalize_mode, STOCHASTIC


@dataclass(frozen=True)
class HyperEval:
    H: float
    gradH: np.ndarray
    stationarity_det: float
    stationarity_proj: float


def lower_level_solution(params, x):
    """y*(x): block i equals b_i * M e_n with b = (x0, x_1, ..., x_T)."""
    x = np.asarray(x, dtype=float)
    if x.shape != (params.T,):
        raise ValueError(f"x has shape {x.shape}, expected ({params.T},)")
    b = np.concatenate(([params.x0], x))
    return np.outer(b, params.M_col)


def _chain_args(params, x):
    xf = np.concatenate(([params.x0], np.asarray(x, dtype=float)))
    u = params.C_l * params.M_nn * xf[:-1] / params.lam
    v = params.C_r * params.M_1n * xf[1:] / params.lam
    return np.ascontiguousarray(u), np.ascontiguousarray(v)


def hyper_value(params, x):
    u, v = _chain_args(params, x)
    h, _, _ = _kernels.chain_terms(u, v)
    return params.scale * float(h.sum())


def hyper_grad(params, x):
    u, v = _chain_args(params, x)
    h, hu, hv = _kernels.chain_terms(u, v)
    al = params.C_l * params.M_nn / params.lam
    ar = params.C_r * params.M_1n / params.lam
    g = params.scale * ar * hv
    # term i+1 depends on x_i through its u-argument
    g[:-1] += params.scale * al * hu[1:]
    return params.scale * float(h.sum()), g


def hyper_hess(params, x):
    """Tri-diagonal Hessian of H as (diag, off)."""
    u, v = _chain_args(params, x)
    huu, huv, hvv = _kernels.chain_hess(u, v)
    al = params.C_l * params.M_nn / params.lam
    ar = params.C_r * params.M_1n / params.lam
    s = params.scale
    diag = s * ar * ar * hvv
    diag[:-1] += s * al * al * huu[1:]
    off = s * al * ar * huv[1:]
    return diag, off


def projected_mapping(params, x, g):
    """L_h * || P_X[x - g/L_h] - x ||_2 (identity projection when unconstrained)."""
    if params.stochastic:
        r = params.x_radius
        step = np.clip(x - g / params.L_h, -r, r) - x
        return params.L_h * float(np.linalg.norm(step))
    return float(np.linalg.norm(g))


def hyper_eval(params, x, mode=None):
    mode = normalize_mode(mode or params.mode)
    x = np.asarray(x, dtype=float)
    H, g = hyper_grad(params, x)
    sdet = float(np.linalg.norm(g))
    if mode == STOCHASTIC and params.stochastic:
        sproj = projected_mapping(params, x, g)
    else:
        sproj = sdet
    return HyperEval(H, g, sdet, sproj)


def stationarity(params, x, mode=None):
    ev = hyper_eval(params, x, mode)
    if normalize_mode(mode or params.mode) == STOCHASTIC:
        return ev.stationarity_proj
    return ev.stationarity_det


def composed_value(params, x):
    """f(x, y*(x)) through the explicit lower-level solve."""
    y = lower_level_solution(params, x)
    return eval_f(params, BilevelPoint(np.asarray(x, dtype=float), y))


def lower_level_residual(params, x):
    y = lower_level_solution(params, x)
    _, gy = grad_g(params, BilevelPoint(np.asarray(x, dtype=float), y))
    return float(np.abs(gy).max())


def lemma_grad_lower_bound(params, x):
    """Find j with |x_{j-1}| >= x0 > |x_j| and check ||grad H|| >= grad_scale.

    Returns (holds, j) with j 1-based. Raises ValueError when every
    coordinate is at least x0 in magnitude.
    """
    x = np.asarray(x, dtype=float)
    thr = params.lam / (params.C_tilde * params.n)
    small = np.flatnonzero(np.abs(x) < thr)
    if small.size == 0:
        raise ValueError("all coordinates large: no |x_i| < lambda/(C_tilde n)")
    j = int(small[0]) + 1
    _, g = hyper_grad(params, x)
    return bool(np.linalg.norm(g) >= params.grad_scale), j


@dataclass(frozen=True)
class GapBound:
    H0: float
    lower: float
    bound: float
    descent_inf: float
    analytic_floor: float


def analytic_floor(params):
    """-(lam^2 L_f / L) * T * sup(Psi) * sup(Phi) >= -12 lam^2 L_f T / L."""
    return -params.scale * params.T * math.e * math.sqrt(2 * math.pi * math.e)


def gap_bound(params, starts=32, seed=0):
    H0 = hyper_value(params, np.zeros(params.T))
    bound = 12.0 * params.scale * params.T
    rng = np.random.default_rng(seed)
    best = H0
    box = 20.0 * params.x0
    bounds = [(-box, box)] * params.T if params.T <= 5000 else None
    for _ in range(starts):
        x_init = rng.uniform(-box, box, params.T)
        res = minimize(lambda z: hyper_grad(params, z), x_init, jac=True,
                       method="L-BFGS-B", bounds=bounds, options={"maxiter": 500})
        best = min(best, float(res.fun))
    floor = analytic_floor(params)
    return GapBound(H0=H0, lower=-bound, bound=bound, descent_inf=best, analytic_floor=floor)
