"""Numba switch.

Set ``STORMSEG_DISABLE_NUMBA=1`` to force the pure-numpy kernels (useful for
debugging and for environments without a working LLVM).
"""
import os

_disabled = os.environ.get("STORMSEG_DISABLE_NUMBA", "0").strip().lower() in ("1", "true", "yes")

try:
    if _disabled:
        raise ImportError("numba disabled by STORMSEG_DISABLE_NUMBA")
    from numba import njit as _njit

    HAVE_NUMBA = True
except ImportError:
    _njit = None
    HAVE_NUMBA = False


def njit(fn):
    """Compile ``fn`` with numba when enabled, otherwise return it unchanged."""
    if HAVE_NUMBA:
        return _njit(cache=True, fastmath=False)(fn)
    return fn
