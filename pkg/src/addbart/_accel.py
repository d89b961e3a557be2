"""Numba switch for the hot kernels.

Every kernel in :mod:`addbart._kernels` is written against the subset of
NumPy that numba compiles, so the same source runs either jitted or as plain
NumPy. Set ``ADDBART_DISABLE_NUMBA=1`` before import to force the NumPy path.
"""

import os

_FLAG = os.environ.get("ADDBART_DISABLE_NUMBA", "").strip().lower()

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

USE_NUMBA = numba is not None and _FLAG not in ("1", "true", "yes", "on")


def jit(fn):
    """Compile ``fn`` with ``numba.njit`` unless the NumPy path is selected."""
    if USE_NUMBA:
        return numba.njit(cache=True)(fn)
    return fn


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
