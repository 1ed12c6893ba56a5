"""Numba switch.

Set ``SSL_FEWSHOT_DISABLE_NUMBA=1`` to force the pure-numpy kernels. The flag
is read once at import time.
"""

import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

HAVE_NUMBA = numba is not None
DISABLED = os.environ.get("SSL_FEWSHOT_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}
USE_NUMBA = HAVE_NUMBA and not DISABLED


def njit(fn):
    """``numba.njit`` with caching and the GIL released; identity without numba."""
    if not HAVE_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
