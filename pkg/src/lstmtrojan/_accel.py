"""JIT switch for the numeric kernels.

Set ``LSTMTROJAN_NO_JIT=1`` before import to run every kernel as plain numpy.
"""
import os

_DISABLED = os.environ.get("LSTMTROJAN_NO_JIT", "").strip().lower() in {"1", "true", "yes"}

try:
    from numba import njit as _njit
except ImportError:  # pragma: no cover
    _njit = None

JIT_ENABLED = _njit is not None and not _DISABLED


def njit(fn):
    if JIT_ENABLED:
        return _njit(cache=True, nogil=True)(fn)
    return fn
