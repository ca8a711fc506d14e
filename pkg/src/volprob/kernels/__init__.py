"""Convolution kernel backends.

The compiled extension is preferred when importable; a pure numpy
implementation with identical semantics is the fallback. Set
VOLPROB_KERNELS=native|fallback to force one (native raises if the
extension is missing). BACKEND records which one is active.
"""

import os

from . import reference

_requested = os.environ.get("VOLPROB_KERNELS", "auto").strip().lower()
if _requested not in ("auto", "native", "fallback", ""):
    raise ImportError(
        f"VOLPROB_KERNELS must be 'auto', 'native', or 'fallback', got {_requested!r}")

if _requested == "fallback":
    _impl = reference
    BACKEND = "fallback"
else:
    try:
        from . import _native as _impl
        BACKEND = "native"
    except ImportError:
        if _requested == "native":
            raise
        _impl = reference
        BACKEND = "fallback"

conv3d_forward = _impl.conv3d_forward
conv3d_backward_input = _impl.conv3d_backward_input
conv3d_backward_kernel = _impl.conv3d_backward_kernel

__all__ = ["BACKEND", "conv3d_forward", "conv3d_backward_input",
           "conv3d_backward_kernel", "reference"]
