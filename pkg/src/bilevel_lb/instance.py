"""
Hard bilevel instance: parameter derivation and evaluation of (f, g).

Layout of the lower variable: ``y`` is a ``(T+1, n)`` array whose row ``i`` is
block ``y^(i)``. The flattened (1-based) index of ``y^(i)_j`` is ``i*n + j``;
0-based numpy positions are one less. The upper variable ``x`` has length
``T`` and holds ``x_1..x_T``; the constant ``x0`` drives block 0 and is not
part of ``x``.
"""
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import _kernels
from .scalar_hardness import SupTable, certify_sups
from .tridiag import C_HIGH, resolvent_last_column

log = logging.getLogger(__name__)

DETERMINISTIC = "deterministic"
STOCHASTIC = "stochastic"
_MODE_ALIASES = {"det": DETERMINISTIC, "deterministic": DETERMINISTIC,
                 "stoc": STOCHASTIC, "stochastic": STOCHASTIC}

KAPPA_MIN = 5.0
DELTA_OVER_LF_MAX = 10.0
C_TILDE = 1.0
R_X = 2.0
R_Y = 20.0
SUP_GRID_STEP = 1e-5
REL_TOL = 1e-12


def normalize_mode(mode):
    try:
        return _MODE_ALIASES[str(mode).lower()]
    except KeyError:
        raise ValueError(f"unknown mode {mode!r}; use 'det' or 'stoc'") from None


@dataclass(frozen=True)
class FunctionClassParams:
    L_f: float
    L_g: float
    mu: float
    Delta: float
    eps: float
    sigma: float = 0.0

    @property
    def kappa(self):
        return self.L_g / self.mu

    def validate(self):
        if not (self.mu > 0 and self.L_g >= self.mu):
            raise ValueError("need L_g >= mu > 0")
        if not (self.L_f > 0 and self.Delta > 0 and self.eps > 0):
            raise ValueError("L_f, Delta and eps must be positive")
        if not self.sigma >= 0:
            raise ValueError("sigma must be nonnegative")
        if self.kappa < KAPPA_MIN:
            raise ValueError(f"condition number too small for n >= 1 (kappa={self.kappa:g} < 5)")
        if self.Delta / self.L_f > DELTA_OVER_LF_MAX:
            raise ValueError(f"Delta/L_f = {self.Delta / self.L_f:g} exceeds {DELTA_OVER_LF_MAX:g}")
        return self


@dataclass(frozen=True)
class DerivedInstanceParams:
    fc: FunctionClassParams
    mode: str
    n: int
    T: int
    lam: float
    L_const: float
    C_tilde: float
    C_l: float
    C_r: float
    x0: float
    M_1n: float
    M_nn: float
    L_h: float
    c0: float
    c1: float
    c2: float | None
    c3: float | None
    r_x: float | None
    r_y: float | None
    p: float | None
    sup_table: SupTable = field(repr=False)
    # (4n^2+1)/n^2 * (A + I/n^2)^{-1} e_n, kept for the lower-level solve
    M_col: np.ndarray = field(repr=False, compare=False)

    @property
    def stochastic(self):
        return self.mode == STOCHASTIC

    @property
    def scale(self):
        """The prefactor lambda^2 L_f / L of every chain term."""
        return self.lam**2 * self.fc.L_f / self.L_const

    @property
    def grad_scale(self):
        """lambda L_f C_tilde n / L: the hyper-gradient floor before the chain ends."""
        return self.lam * self.fc.L_f * self.C_tilde * self.n / self.L_const

    @property
    def g_coef(self):
        n = self.n
        return self.fc.L_g * n * n / (4 * n * n + 1)

    @property
    def dim_y(self):
        return self.n * (self.T + 1)

    @property
    def x_radius(self):
        return self.r_x * self.lam / self.n if self.stochastic else math.inf

    @property
    def y_radius(self):
        return self.r_y * self.lam if self.stochastic else math.inf

    @property
    def chain_length(self):
        return self.T * self.n

    def to_dict(self):
        d = {k: v for k, v in asdict(self).items() if k not in ("sup_table", "M_col", "fc")}
        d["fc"] = asdict(self.fc)
        d["kappa"] = self.fc.kappa
        d["sup_table"] = self.sup_table.to_dict()
        return d

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def block_dimension(L_g, mu):
    q = (L_g - mu) / (4.0 * mu)
    n = int(math.floor(math.sqrt(q)))
    while (n + 1) ** 2 <= q:
        n += 1
    while n > 0 and n * n > q:
        n -= 1
    return n


def hardness_constants(sup_table):
    """K = b_psi2 b_phi + b_psi b_phi2 + 2 b_psi1 b_phi1 and the gradient analogue.

    Each second partial of h(u,v) = Psi(-u)Phi(-v) - Psi(u)Phi(v) is bounded by
    one product of sups because at most one of Psi^(k)(u), Psi^(k)(-u) is
    nonzero.
    """
    b = sup_table.bounds()
    hess = b["psi2"] * b["phi"] + b["psi"] * b["phi2"] + 2.0 * b["psi1"] * b["phi1"]
    grad = b["psi1"] * b["phi"] + b["psi"] * b["phi1"]
    return hess, grad


def derive_params(fc, mode=DETERMINISTIC):
    mode = normalize_mode(mode)
    fc.validate()
    if mode == STOCHASTIC and not fc.sigma > 0:
        raise ValueError("stochastic mode requires sigma > 0")

    n = block_dimension(fc.L_g, fc.mu)
    if n < 1:
        raise ValueError("condition number too small for n >= 1")
    col = resolvent_last_column(n)
    M_col = (4 * n * n + 1) / (n * n) * col.values
    M_1n, M_nn = float(M_col[0]), float(M_col[-1])

    C_tilde = C_TILDE
    C_l = C_tilde * n / M_nn
    C_r = C_tilde * n / M_1n

    sups = certify_sups(SUP_GRID_STEP)
    K_hess, K_grad = hardness_constants(sups)
    C_max = max(C_l, C_r)
    L_const = C_max**2 * K_hess
    a_max = max(C_l * M_nn, C_r * M_1n) / n
    c0 = a_max**2 * K_hess
    c1 = C_max * K_grad

    if mode == STOCHASTIC:
        r_x, r_y = R_X, R_Y
        assert r_x > 1.0 / C_tilde and r_y >= 10.0 * r_x
        c2 = C_tilde * min(1.0, c0 * (r_x - 1.0 / C_tilde))
        c3 = 4.0 * r_y**2
        lam = 2.0 * L_const * fc.eps / (c2 * fc.L_f * n)
    else:
        r_x = r_y = c2 = c3 = None
        lam = fc.eps * L_const / (fc.L_f * C_tilde * n)

    T = int(math.floor(fc.Delta * L_const / (12.0 * lam**2 * fc.L_f)))
    if T < 1:
        raise ValueError("accuracy/gap combination yields empty chain (T < 1)")

    x0 = lam / (C_l * M_nn)
    p = None
    if mode == STOCHASTIC:
        p = min(1.0, c3 * fc.L_g**2 * lam**2 / fc.sigma**2)
        assert x0 < r_x * lam / n

    L_h = c0 * n * n * fc.L_f / L_const

    params = DerivedInstanceParams(
        fc=fc, mode=mode, n=n, T=T, lam=lam, L_const=L_const, C_tilde=C_tilde,
        C_l=C_l, C_r=C_r, x0=x0, M_1n=M_1n, M_nn=M_nn, L_h=L_h,
        c0=c0, c1=c1, c2=c2, c3=c3, r_x=r_x, r_y=r_y, p=p,
        sup_table=sups, M_col=M_col,
    )
    _check_identities(params)
    return params


def _check_identities(pr):
    n = pr.n
    assert math.isclose(pr.C_l * pr.M_nn / n, pr.C_tilde, rel_tol=REL_TOL)
    assert math.isclose(pr.C_r * pr.M_1n / n, pr.C_tilde, rel_tol=REL_TOL)
    assert math.isclose(pr.x0, pr.lam / (pr.C_tilde * n), rel_tol=REL_TOL)
    assert pr.fc.L_g / (4 * n * n + 1) >= pr.fc.mu * (1 - REL_TOL)
    lhs = pr.lam * math.sqrt(pr.T)
    assert lhs <= math.sqrt(pr.fc.Delta * pr.L_const / (12 * pr.fc.L_f)) * (1 + REL_TOL)


# ---------------------------------------------------------------------------
# Points
# ---------------------------------------------------------------------------

@dataclass
class BilevelPoint:
    x: np.ndarray
    y: np.ndarray

    @classmethod
    def zeros(cls, params):
        return cls(np.zeros(params.T), np.zeros((params.T + 1, params.n)))

    @classmethod
    def from_flat(cls, params, x, y_flat):
        return cls(np.array(x, dtype=float), np.array(y_flat, dtype=float).reshape(params.T + 1, params.n))

    @property
    def y_flat(self):
        return self.y.reshape(-1)

    def copy(self):
        return BilevelPoint(self.x.copy(), self.y.copy())


def _check(params, pt):
    if pt.x.shape != (params.T,) or pt.y.shape != (params.T + 1, params.n):
        raise ValueError(
            f"point shape x{pt.x.shape}, y{pt.y.shape} does not match "
            f"T={params.T}, n={params.n}")


def _uv(params, y):
    # u_i = C_l y_n^(i-1) / lam and v_i = C_r y_1^(i) / lam for i = 1..T
    u = np.ascontiguousarray(params.C_l * y[:-1, -1] / params.lam)
    v = np.ascontiguousarray(params.C_r * y[1:, 0] / params.lam)
    return u, v


def chain_indices(params):
    """0-based flat positions of y_n^(i-1) and y_1^(i), i = 1..T."""
    i = np.arange(1, params.T + 1)
    return i * params.n - 1, i * params.n


def eval_f(params, pt):
    _check(params, pt)
    u, v = _uv(params, pt.y)
    h, _, _ = _kernels.chain_terms(u, v)
    return params.scale * float(h.sum())


def grad_f(params, pt):
    """(grad_x, grad_y); grad_x is identically zero."""
    _check(params, pt)
    u, v = _uv(params, pt.y)
    _, hu, hv = _kernels.chain_terms(u, v)
    gy = np.zeros(params.dim_y)
    iu, iv = chain_indices(params)
    pref = params.scale / params.lam
    gy[iu] += pref * params.C_l * hu
    gy[iv] += pref * params.C_r * hv
    return np.zeros(params.T), gy


def hess_f(params, pt):
    """Tri-diagonal Hessian of f in flattened y as (diag, off)."""
    _check(params, pt)
    u, v = _uv(params, pt.y)
    huu, huv, hvv = _kernels.chain_hess(u, v)
    pref = params.fc.L_f / params.L_const
    diag = np.zeros(params.dim_y)
    off = np.zeros(params.dim_y - 1)
    iu, iv = chain_indices(params)
    diag[iu] += pref * params.C_l**2 * huu
    diag[iv] += pref * params.C_r**2 * hvv
    off[iu] += pref * params.C_l * params.C_r * huv
    return diag, off


def _b_vector(params, x):
    return np.concatenate(([params.x0], x))


def eval_g(params, pt):
    _check(params, pt)
    n = params.n
    Ay = _kernels.laplacian_blocks(np.ascontiguousarray(pt.y), 1.0 / (n * n))
    quad = 0.5 * params.g_coef * float(np.sum(pt.y * Ay))
    lin = params.fc.L_g * float(np.dot(_b_vector(params, pt.x), pt.y[:, -1]))
    return quad - lin


def grad_g(params, pt):
    _check(params, pt)
    n = params.n
    gy = params.g_coef * _kernels.laplacian_blocks(np.ascontiguousarray(pt.y), 1.0 / (n * n))
    gy[:, -1] -= params.fc.L_g * _b_vector(params, pt.x)
    gx = -params.fc.L_g * pt.y[1:, -1]
    return gx, gy.reshape(-1)


def project_domain(params, pt):
    if not params.stochastic:
        log.warning("project_domain called on a deterministic instance; returning point unchanged")
        return pt
    _check(params, pt)
    return BilevelPoint(np.clip(pt.x, -params.x_radius, params.x_radius),
                        np.clip(pt.y, -params.y_radius, params.y_radius))


def tamper(params, **fc_changes):
    """Copy of ``params`` whose function-class record is edited (mutation tests)."""
    return replace(params, fc=replace(params.fc, **fc_changes))
