"""Kernel backend selection.

The compiled extension is preferred; set ``MAARCERT_PURE_PYTHON=1`` to force
the numpy fallback. ``BACKEND`` names the active implementation.
"""
import os

from . import _kernels_py

if os.environ.get("MAARCERT_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl

        BACKEND = "compiled"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

conv2d_forward = _impl.conv2d_forward
conv2d_backward = _impl.conv2d_backward
zono_bounds = _impl.zono_bounds

__all__ = ["BACKEND", "conv2d_forward", "conv2d_backward", "zono_bounds"]
