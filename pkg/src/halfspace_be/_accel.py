"""Backend switch for the hot kernels.

HALFSPACE_BE_BACKEND=numba (default when numba imports) or numpy.
"""
import os

_requested = os.environ.get("HALFSPACE_BE_BACKEND", "numba").strip().lower()

try:
    import numba as nb
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    nb = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and _requested != "numpy"


def backend():
    return "numba" if USE_NUMBA else "numpy"


def njit(*args, **kwargs):
    """numba.njit when available, otherwise a no-op decorator."""
    if HAVE_NUMBA:
        return nb.njit(*args, **kwargs)

    def deco(fn):
        return fn
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return deco


def pick(numba_impl, numpy_impl):
    return numba_impl if USE_NUMBA else numpy_impl
