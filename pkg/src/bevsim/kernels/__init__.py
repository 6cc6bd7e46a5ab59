"""Kernel backend selection.

BEVSIM_BACKEND picks the implementation of the hot scatter/sampling/ray
kernels:

  auto   use numba when importable, else pure numpy (default)
  numba  require the numba JIT kernels
  numpy  force the pure-numpy fallback

Convolution always runs through the shared im2col+BLAS path in conv.py.
"""

import os

from .conv import conv2d_backward_w, conv2d_backward_x, conv2d_forward

_choice = os.environ.get("BEVSIM_BACKEND", "auto").lower()
if _choice not in ("auto", "numba", "numpy"):
    raise ValueError(
        f"BEVSIM_BACKEND must be one of auto/numba/numpy, got {_choice!r}"
    )

if _choice == "numpy":
    from . import numpy_impl as _impl
else:
    try:
        from . import numba_impl as _impl
    except ImportError:
        if _choice == "numba":
            raise
        from . import numpy_impl as _impl


def active_backend():
    """Name of the kernel backend selected at import time."""
    return _impl.BACKEND_NAME


scatter_add_forward = _impl.scatter_add_forward
scatter_add_backward = _impl.scatter_add_backward
segment_max_forward = _impl.segment_max_forward
segment_max_backward = _impl.segment_max_backward
bilinear_forward = _impl.bilinear_forward
bilinear_backward = _impl.bilinear_backward
raycast_boxes = _impl.raycast_boxes
suppress_local_max = _impl.suppress_local_max

__all__ = [
    "active_backend",
    "scatter_add_forward",
    "scatter_add_backward",
    "segment_max_forward",
    "segment_max_backward",
    "bilinear_forward",
    "bilinear_backward",
    "raycast_boxes",
    "suppress_local_max",
    "conv2d_forward",
    "conv2d_backward_x",
    "conv2d_backward_w",
]
