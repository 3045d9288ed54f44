"""Numba switch for the hot kernels.

Set ``SEMKIT_USE_NUMBA=0`` to force the pure-numpy path (also used
automatically when numba is not importable).
"""
import logging
import os

_flag = os.environ.get("SEMKIT_USE_NUMBA", "1").strip().lower()

try:
    import numba

    logging.getLogger("numba").setLevel(logging.WARNING)
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and _flag not in ("0", "false", "no", "off")


def njit(func):
    """``numba.njit`` when available, identity otherwise."""
    if not HAVE_NUMBA:
        return func
    return numba.njit(cache=True, nogil=True)(func)


def set_numba(enabled: bool) -> bool:
    """Toggle the numba path at runtime; returns the previous setting."""
    global USE_NUMBA
    previous = USE_NUMBA
    USE_NUMBA = bool(enabled) and HAVE_NUMBA
    return previous
