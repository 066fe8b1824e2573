"""
Time the numba kernels against their pure-numpy twins.

    python3 benchmarks/bench_kernels.py [--size N] [--repeat R]

Each kernel is warmed once (which triggers numba compilation) and then timed
as the best of R runs. Outputs are compared so a speedup never hides a
disagreement.
"""
import argparse
import time

import numpy as np

from bilevel_lb import _kernels
from bilevel_lb._accel import HAVE_NUMBA


def best_time(fn, args, repeat):
    fn(*args)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def cases(size, rng):
    x = rng.uniform(-4, 4, size)
    u = rng.uniform(-3, 3, size)
    v = rng.uniform(-3, 3, size)
    n = 64
    rows = max(size // n, 1)
    y = rng.standard_normal((rows, n))
    diag = np.full(size, 2.0)
    diag[0] = diag[-1] = 1.0
    off = -np.ones(size - 1)
    b = rng.standard_normal(size)
    return {
        "psi_family": (x,),
        "phi_family": (x,),
        "chain_terms": (u, v),
        "chain_hess": (u, v),
        "thomas": (diag, off, 1e-4, b),
        "laplacian_blocks": (y, 1.0 / n**2),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[1])
    ap.add_argument("--size", type=int, default=200_000)
    ap.add_argument("--repeat", type=int, default=7)
    args = ap.parse_args()
    if not HAVE_NUMBA:
        print("numba is not installed; only the numpy path can be timed")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<18}{'numpy [ms]':>12}{'numba [ms]':>12}{'speedup':>10}")
    for name, call_args in cases(args.size, rng).items():
        f_np = _kernels.BACKENDS["numpy"][name]
        t_np = best_time(f_np, call_args, args.repeat)
        if HAVE_NUMBA:
            f_nb = _kernels.BACKENDS["numba"][name]
            t_nb = best_time(f_nb, call_args, args.repeat)
            a, b = f_np(*call_args), f_nb(*call_args)
            a = a if isinstance(a, tuple) else (a,)
            b = b if isinstance(b, tuple) else (b,)
            for p, q in zip(a, b):
                np.testing.assert_allclose(p, q, rtol=1e-10, atol=1e-12)
            print(f"{name:<18}{1e3 * t_np:>12.3f}{1e3 * t_nb:>12.3f}{t_np / t_nb:>9.1f}x")
        else:
            print(f"{name:<18}{1e3 * t_np:>12.3f}{'-':>12}{'-':>10}")


if __name__ == "__main__":
    main()
