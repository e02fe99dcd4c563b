"""Numba switch.

Hot kernels are written once as plain loops and compiled with ``njit`` when
numba is importable. Setting ``PKTSEER_NO_NUMBA=1`` forces the vectorised
numpy implementations instead; the choice is made once, at import time.
"""

import os

_FLAG = os.environ.get("PKTSEER_NO_NUMBA", "").strip().lower()

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and _FLAG not in {"1", "true", "yes", "on"}


def njit(fn):
    """Compile ``fn`` with numba if available, else return it untouched."""
    if not HAVE_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
