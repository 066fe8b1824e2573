"""
Hot numeric kernels, each in two flavours.

``*_nb`` functions are plain loops compiled by numba; ``*_np`` functions are
vectorized numpy. Module-level names without suffix point at whichever path
``_accel.USE_NUMBA`` selects. Both paths are exercised by the test-suite and
compared in ``benchmarks/bench_kernels.py``.
"""
import math

import numpy as np
from scipy.special import erfc

from ._accel import USE_NUMBA, njit

SQRT_E = math.sqrt(math.e)
SQRT_HALF_PI = math.sqrt(math.pi / 2.0)
# 1/z^2 above this makes exp(1 - 1/z^2) underflow to exactly 0.0
_PSI_CUTOFF = 800.0


# ---------------------------------------------------------------------------
# Psi / Phi with first and second derivatives
# ---------------------------------------------------------------------------

@njit
def psi_family_nb(x):
    n = x.shape[0]
    p0 = np.zeros(n)
    p1 = np.zeros(n)
    p2 = np.zeros(n)
    for k in range(n):
        if x[k] <= 0.5:
            continue
        z = 2.0 * x[k] - 1.0
        w = 1.0 / (z * z)
        if w > _PSI_CUTOFF:
            continue
        v = math.exp(1.0 - w)
        p0[k] = v
        p1[k] = 4.0 * v * w / z
        p2[k] = v * (16.0 * w * w * w - 24.0 * w * w)
    return p0, p1, p2


def psi_family_np(x):
    x = np.asarray(x, dtype=float)
    z = 2.0 * x - 1.0
    live = z > 0.0
    w = np.zeros_like(x)
    np.divide(1.0, z * z, out=w, where=live)
    live &= w <= _PSI_CUTOFF
    zs = np.where(live, z, 1.0)
    ws = np.where(live, w, 1.0)
    v = np.where(live, np.exp(1.0 - ws), 0.0)
    p1 = 4.0 * v * ws / zs
    p2 = v * (16.0 * ws**3 - 24.0 * ws**2)
    return v, p1, p2


@njit
def phi_family_nb(x):
    n = x.shape[0]
    f0 = np.empty(n)
    f1 = np.empty(n)
    f2 = np.empty(n)
    for k in range(n):
        f0[k] = SQRT_E * SQRT_HALF_PI * math.erfc(-x[k] / math.sqrt(2.0))
        d = SQRT_E * math.exp(-0.5 * x[k] * x[k])
        f1[k] = d
        f2[k] = -x[k] * d
    return f0, f1, f2


def phi_family_np(x):
    x = np.asarray(x, dtype=float)
    f0 = SQRT_E * SQRT_HALF_PI * erfc(-x / math.sqrt(2.0))
    f1 = SQRT_E * np.exp(-0.5 * x * x)
    return f0, f1, -x * f1


# ---------------------------------------------------------------------------
# Chain terms h(u, v) = Psi(-u) Phi(-v) - Psi(u) Phi(v)
# ---------------------------------------------------------------------------

@njit
def chain_terms_nb(u, v):
    """Values and first partials of h for each (u_i, v_i) pair."""
    pp0, pp1, _ = psi_family_nb(u)
    pm0, pm1, _ = psi_family_nb(-u)
    fp0, fp1, _ = phi_family_nb(v)
    fm0, fm1, _ = phi_family_nb(-v)
    m = u.shape[0]
    h = np.empty(m)
    hu = np.empty(m)
    hv = np.empty(m)
    for i in range(m):
        h[i] = pm0[i] * fm0[i] - pp0[i] * fp0[i]
        hu[i] = -pm1[i] * fm0[i] - pp1[i] * fp0[i]
        hv[i] = -pm0[i] * fm1[i] - pp0[i] * fp1[i]
    return h, hu, hv


def chain_terms_np(u, v):
    pp0, pp1, _ = psi_family_np(u)
    pm0, pm1, _ = psi_family_np(-u)
    fp0, fp1, _ = phi_family_np(v)
    fm0, fm1, _ = phi_family_np(-v)
    h = pm0 * fm0 - pp0 * fp0
    hu = -pm1 * fm0 - pp1 * fp0
    hv = -pm0 * fm1 - pp0 * fp1
    return h, hu, hv


@njit
def chain_hess_nb(u, v):
    pp0, pp1, pp2 = psi_family_nb(u)
    pm0, pm1, pm2 = psi_family_nb(-u)
    fp0, fp1, fp2 = phi_family_nb(v)
    fm0, fm1, fm2 = phi_family_nb(-v)
    m = u.shape[0]
    huu = np.empty(m)
    huv = np.empty(m)
    hvv = np.empty(m)
    for i in range(m):
        huu[i] = pm2[i] * fm0[i] - pp2[i] * fp0[i]
        huv[i] = pm1[i] * fm1[i] - pp1[i] * fp1[i]
        hvv[i] = pm0[i] * fm2[i] - pp0[i] * fp2[i]
    return huu, huv, hvv


def chain_hess_np(u, v):
    pp0, pp1, pp2 = psi_family_np(u)
    pm0, pm1, pm2 = psi_family_np(-u)
    fp0, fp1, fp2 = phi_family_np(v)
    fm0, fm1, fm2 = phi_family_np(-v)
    return (pm2 * fm0 - pp2 * fp0,
            pm1 * fm1 - pp1 * fp1,
            pm0 * fm2 - pp0 * fp2)


# ---------------------------------------------------------------------------
# Tri-diagonal algebra
# ---------------------------------------------------------------------------

@njit
def thomas_nb(diag, off, shift, b):
    """Solve (T + shift*I) y = b for symmetric tri-diagonal T.

    Returns (y, smallest pivot magnitude).
    """
    n = diag.shape[0]
    c = np.empty(n)
    d = np.empty(n)
    piv = diag[0] + shift
    minpiv = abs(piv)
    if minpiv == 0.0:
        return np.zeros(n), 0.0
    c[0] = off[0] / piv if n > 1 else 0.0
    d[0] = b[0] / piv
    for i in range(1, n):
        piv = diag[i] + shift - off[i - 1] * c[i - 1]
        if abs(piv) < minpiv:
            minpiv = abs(piv)
        if piv == 0.0:
            return np.zeros(n), 0.0
        c[i] = off[i] / piv if i < n - 1 else 0.0
        d[i] = (b[i] - off[i - 1] * d[i - 1]) / piv
    y = np.empty(n)
    y[n - 1] = d[n - 1]
    for i in range(n - 2, -1, -1):
        y[i] = d[i] - c[i] * y[i + 1]
    return y, minpiv


def thomas_np(diag, off, shift, b):
    # The recurrence is inherently sequential; this is the interpreted twin.
    n = diag.shape[0]
    c = np.zeros(n)
    d = np.zeros(n)
    piv = diag[0] + shift
    minpiv = abs(piv)
    if minpiv == 0.0:
        return np.zeros(n), 0.0
    if n > 1:
        c[0] = off[0] / piv
    d[0] = b[0] / piv
    for i in range(1, n):
        piv = diag[i] + shift - off[i - 1] * c[i - 1]
        minpiv = min(minpiv, abs(piv))
        if piv == 0.0:
            return np.zeros(n), 0.0
        if i < n - 1:
            c[i] = off[i] / piv
        d[i] = (b[i] - off[i - 1] * d[i - 1]) / piv
    y = np.empty(n)
    y[-1] = d[-1]
    for i in range(n - 2, -1, -1):
        y[i] = d[i] - c[i] * y[i + 1]
    return y, minpiv


@njit
def laplacian_blocks_nb(y, shift):
    """Row-wise (shift*I + A) y for a (blocks, n) array, A the 1-D Laplacian."""
    nb, n = y.shape
    out = np.empty_like(y)
    for i in range(nb):
        if n == 1:
            out[i, 0] = shift * y[i, 0]
            continue
        out[i, 0] = (1.0 + shift) * y[i, 0] - y[i, 1]
        for j in range(1, n - 1):
            out[i, j] = (2.0 + shift) * y[i, j] - y[i, j - 1] - y[i, j + 1]
        out[i, n - 1] = (1.0 + shift) * y[i, n - 1] - y[i, n - 2]
    return out


def laplacian_blocks_np(y, shift):
    y = np.asarray(y, dtype=float)
    out = shift * y
    if y.shape[1] > 1:
        diff = y[:, 1:] - y[:, :-1]
        out[:, :-1] -= diff
        out[:, 1:] += diff
    return out


if USE_NUMBA:
    psi_family = psi_family_nb
    phi_family = phi_family_nb
    chain_terms = chain_terms_nb
    chain_hess = chain_hess_nb
    thomas = thomas_nb
    laplacian_blocks = laplacian_blocks_nb
else:
    psi_family = psi_family_np
    phi_family = phi_family_np
    chain_terms = chain_terms_np
    chain_hess = chain_hess_np
    thomas = thomas_np
    laplacian_blocks = laplacian_blocks_np

BACKENDS = {
    "numba": dict(psi_family=psi_family_nb, phi_family=phi_family_nb,
                  chain_terms=chain_terms_nb, chain_hess=chain_hess_nb,
                  thomas=thomas_nb, laplacian_blocks=laplacian_blocks_nb),
    "numpy": dict(psi_family=psi_family_np, phi_family=phi_family_np,
                  chain_terms=chain_terms_np, chain_hess=chain_hess_np,
                  thomas=thomas_np, laplacian_blocks=laplacian_blocks_np),
}
