"""
The bump/sigmoid pair used by the hard instances.

``psi`` is the smooth one-sided bump ``exp(1 - 1/(2x-1)^2)`` (zero for
``x <= 1/2``) and ``phi`` is the scaled Gaussian CDF
``sqrt(e) * int_{-inf}^x exp(-t^2/2) dt``.
"""
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import _kernels

SQRT_E = math.sqrt(math.e)
PHI_LIMIT = math.sqrt(2.0 * math.pi * math.e)
PSI_LIMIT = math.e
PSI1_LIMIT = math.sqrt(54.0 / math.e)
PHI1_LIMIT = SQRT_E

SAFETY = 1.1


def _wrap(fn, x, idx):
    arr = np.ascontiguousarray(np.asarray(x, dtype=float).reshape(-1))
    out = fn(arr)[idx]
    if np.ndim(x) == 0:
        return float(out[0])
    return out.reshape(np.shape(x))


def psi(x):
    return _wrap(_kernels.psi_family, x, 0)


def phi(x):
    return _wrap(_kernels.phi_family, x, 0)


def psi_d(x, order):
    """First or second derivative of ``psi``; identically 0 on ``x <= 1/2``."""
    if order not in (1, 2):
        raise ValueError(f"order must be 1 or 2, got {order!r}")
    return _wrap(_kernels.psi_family, x, order)


def phi_d(x, order):
    if order not in (1, 2):
        raise ValueError(f"order must be 1 or 2, got {order!r}")
    return _wrap(_kernels.phi_family, x, order)


@dataclass(frozen=True)
class SupTable:
    """Grid suprema of |psi|, |psi'|, |psi''|, |phi|, |phi'|, |phi''|.

    The ``sup_*`` fields are raw grid maxima. ``bound(name)`` gives the value
    used to size constants: the raw maximum inflated by ``safety`` and then
    capped by the closed-form envelope where one exists. Capping is what keeps
    ``bound('psi')`` and ``bound('phi')`` valid, since their true suprema are
    limits at infinity that a finite scan cannot reach.
    """

    sup_psi: float
    sup_psi1: float
    sup_psi2: float
    sup_phi: float
    sup_phi1: float
    sup_phi2: float
    grid_step: float
    safety: float = SAFETY

    _ENVELOPES = {"psi": PSI_LIMIT, "psi1": PSI1_LIMIT, "phi": PHI_LIMIT, "phi1": PHI1_LIMIT}

    def bound(self, name):
        raw = getattr(self, "sup_" + name)
        env = self._ENVELOPES.get(name)
        # psi and phi approach their envelopes only at infinity
        if name in ("psi", "phi"):
            return env
        val = raw * self.safety
        return min(val, env) if env is not None else val

    def bounds(self):
        return {k: self.bound(k) for k in ("psi", "psi1", "psi2", "phi", "phi1", "phi2")}

    def to_dict(self):
        d = asdict(self)
        d["bounds"] = self.bounds()
        return d


_SUP_CACHE = {}


def certify_sups(grid_step=1e-5):
    """Scan the hardness functions and return a :class:`SupTable`.

    Psi-family is scanned on (1/2, 8], Phi-family on [-8, 8].
    """
    if not grid_step > 0:
        raise ValueError("grid_step must be positive")
    if grid_step > 1e-4:
        raise ValueError(f"grid_step={grid_step} too coarse; need <= 1e-4")
    key = float(grid_step)
    if key in _SUP_CACHE:
        return _SUP_CACHE[key]

    xs = np.arange(0.5 + grid_step, 8.0 + 0.5 * grid_step, grid_step)
    p0, p1, p2 = _kernels.psi_family(xs)
    ys = np.arange(-8.0, 8.0 + 0.5 * grid_step, grid_step)
    # include the analytic maximisers of |phi'| and |phi''| exactly
    ys = np.union1d(ys, [-1.0, 0.0, 1.0])
    f0, f1, f2 = _kernels.phi_family(ys)

    table = SupTable(
        sup_psi=float(p0.max()),
        sup_psi1=float(np.abs(p1).max()),
        sup_psi2=float(np.abs(p2).max()),
        sup_phi=float(f0.max()),
        sup_phi1=float(np.abs(f1).max()),
        sup_phi2=float(np.abs(f2).max()),
        grid_step=key,
    )
    _check_envelopes(table)
    # beyond the scan window the derivatives only decay
    assert p1[-1] < 1e-2 * table.sup_psi1 and abs(p2[-1]) < 1e-2 * table.sup_psi2
    assert f1[0] < 1e-12 and f1[-1] < 1e-12 and abs(f2[0]) < 1e-12
    _SUP_CACHE[key] = table
    return table


def _check_envelopes(t):
    assert 0 < t.sup_psi < PSI_LIMIT
    assert 0 < t.sup_psi1 <= PSI1_LIMIT * (1 + 1e-12)
    assert 0 < t.sup_phi < PHI_LIMIT
    assert 0 < t.sup_phi1 <= PHI1_LIMIT * (1 + 1e-12)
    for name in ("psi1", "psi2", "phi1", "phi2"):
        assert math.isfinite(getattr(t, "sup_" + name))
