"""Hot loops behind conv2d and max_pool2d.

The numba backend is used when numba imports cleanly, unless the environment
variable ``UROLESION_DISABLE_NUMBA`` is set to a non-empty value other than
``0``. Both backends share array layouts, so they are interchangeable.
"""
import os

from . import _numpy as numpy_kernels

numba_kernels = None
if os.environ.get("UROLESION_DISABLE_NUMBA", "0") in ("", "0"):
    try:
        from . import _numba as numba_kernels
    except ImportError:  # pragma: no cover - numba missing
        numba_kernels = None

_active = numba_kernels if numba_kernels is not None else numpy_kernels
BACKEND = "numba" if _active is numba_kernels else "numpy"

im2col = _active.im2col
col2im = _active.col2im
maxpool_forward = _active.maxpool_forward
maxpool_backward = _active.maxpool_backward

__all__ = ["BACKEND", "im2col", "col2im", "maxpool_forward", "maxpool_backward",
           "numpy_kernels", "numba_kernels"]
