"""
The 1-D discrete Laplacian, shifted tri-diagonal solves and the closed-form
spectrum used to bound the resolvent (A + I/n^2)^{-1}.
"""
import math
from dataclasses import dataclass

import numpy as np

from . import _kernels

PIVOT_TOL = 1e-14
# (1 -/+ pi^2/12): linear-in-n envelope of the resolvent's last column
C_LOW = 1.0 - math.pi**2 / 12.0
C_HIGH = 1.0 + math.pi**2 / 12.0


class SingularSystemError(ArithmeticError):
    pass


@dataclass(frozen=True)
class TridiagSym:
    n: int
    diag: np.ndarray
    off: np.ndarray

    def __post_init__(self):
        if self.diag.shape != (self.n,) or self.off.shape != (max(self.n - 1, 0),):
            raise ValueError("diag/off lengths do not match n")
        self.diag.setflags(write=False)
        self.off.setflags(write=False)

    def dense(self):
        m = np.diag(self.diag.astype(float))
        if self.n > 1:
            m += np.diag(self.off, 1) + np.diag(self.off, -1)
        return m

    def matvec(self, z):
        z = np.asarray(z, dtype=float)
        out = self.diag * z
        if self.n > 1:
            out[:-1] += self.off * z[1:]
            out[1:] += self.off * z[:-1]
        return out


def build_laplacian(n):
    """A = tridiag(-1, (1, 2, ..., 2, 1), -1); the 1x1 case is (0)."""
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise ValueError(f"n must be a positive integer, got {n!r}")
    n = int(n)
    if n == 1:
        return TridiagSym(1, np.zeros(1), np.zeros(0))
    diag = np.full(n, 2.0)
    diag[0] = diag[-1] = 1.0
    return TridiagSym(n, diag, -np.ones(n - 1))


def thomas_solve(m, shift, b):
    """Solve (m + shift*I) y = b in O(n)."""
    b = np.asarray(b, dtype=float)
    if b.shape != (m.n,):
        raise ValueError(f"rhs has shape {b.shape}, expected ({m.n},)")
    off = m.off if m.n > 1 else np.zeros(1)
    y, minpiv = _kernels.thomas(np.ascontiguousarray(m.diag, dtype=float),
                                np.ascontiguousarray(off, dtype=float),
                                float(shift), np.ascontiguousarray(b))
    if minpiv < PIVOT_TOL:
        raise SingularSystemError(f"pivot {minpiv:.3e} below {PIVOT_TOL}")
    return y


@dataclass(frozen=True)
class SpectralBasis:
    n: int
    eigenvalues: np.ndarray

    def q(self, k, j):
        """Entry j (1-based) of the k-th (1-based) orthonormal eigenvector."""
        j = np.asarray(j, dtype=float)
        if k == 1:
            return np.full_like(j, 1.0 / math.sqrt(self.n))
        return math.sqrt(2.0 / self.n) * np.cos((k - 1) * (j - 0.5) * math.pi / self.n)

    def matrix(self):
        """Q with columns q_1, ..., q_n."""
        j = np.arange(1, self.n + 1)
        return np.column_stack([self.q(k, j) for k in range(1, self.n + 1)])


def spectral_basis(n):
    if n < 1:
        raise ValueError("n must be >= 1")
    k = np.arange(1, n + 1)
    mu = 2.0 * (1.0 - np.cos((k - 1) * math.pi / n))
    mu[0] = 0.0
    return SpectralBasis(int(n), mu)


@dataclass(frozen=True)
class ResolventColumn:
    """Last column v of S = (A + I/n^2)^{-1}."""

    n: int
    values: np.ndarray

    @property
    def s_1n(self):
        return float(self.values[0])

    @property
    def s_nn(self):
        return float(self.values[-1])


def resolvent_last_column(n):
    a = build_laplacian(n)
    e_n = np.zeros(n)
    e_n[-1] = 1.0
    v = thomas_solve(a, 1.0 / n**2, e_n)
    return ResolventColumn(int(n), v)
