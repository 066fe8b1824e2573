"""
Numba switch.

Set ``BILEVEL_LB_DISABLE_NUMBA=1`` to force the pure-numpy kernels. When numba
is missing the numpy path is used silently.
"""
import os

_FLAG = os.environ.get("BILEVEL_LB_DISABLE_NUMBA", "").strip().lower()

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is installed in CI
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and _FLAG not in ("1", "true", "yes", "on")


def njit(*args, **kwargs):
    """``numba.njit`` when numba is importable, otherwise a no-op decorator.

    The kernels are always compiled when numba exists so both paths can be
    benchmarked side by side; ``USE_NUMBA`` only picks the default export.
    """
    if HAVE_NUMBA:
        kwargs.setdefault("cache", True)
        return numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]

    def wrapper(func):
        return func

    return wrapper


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
