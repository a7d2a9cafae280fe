"""Numba switch.

Set ``HOLISTIC_DISABLE_NUMBA=1`` to force the pure-numpy kernels. The flag is
read once at import time.
"""
import os
import warnings

_disabled = os.environ.get("HOLISTIC_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes"}

try:
    from numba import njit as _njit
except ImportError:  # pragma: no cover - numba is a declared dependency
    _njit = None
    if not _disabled:
        warnings.warn("numba not importable; falling back to numpy kernels", RuntimeWarning)

USE_NUMBA = _njit is not None and not _disabled


def njit(fn):
    """Compile ``fn`` with numba when available, otherwise return it unchanged."""
    if _njit is None:
        return fn
    return _njit(cache=True, nogil=True)(fn)
