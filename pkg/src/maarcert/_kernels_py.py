"""Pure numpy implementations of the hot kernels.

Used when the compiled extension is unavailable or when
``MAARCERT_PURE_PYTHON=1`` is set. Signatures match ``_ckernels``.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _windows(x, kh, kw, stride, ho, wo):
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]


def _out_size(h, w, kh, kw, stride, pad):
    return (h + 2 * pad - kh) // stride + 1, (w + 2 * pad - kw) // stride + 1


def conv2d_forward(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho, wo = _out_size(h, wd, kh, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = _windows(x, kh, kw, stride, ho, wo)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b[None, :, None, None]
    return np.ascontiguousarray(out)


def conv2d_backward(gout, x, w, stride, pad, need_x=True, need_w=True):
    """Return (grad_x, grad_w, grad_b) for ``conv2d_forward``; skipped parts are None."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho, wo = gout.shape[2], gout.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    grad_w = grad_b = None
    if need_w:
        win = _windows(xp, kh, kw, stride, ho, wo)
        grad_w = np.tensordot(gout, win, axes=([0, 2, 3], [0, 2, 3]))
        grad_b = gout.sum(axis=(0, 2, 3))
    if not need_x:
        return None, grad_w, grad_b
    gxp = np.zeros(xp.shape, dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            contrib = np.tensordot(gout, w[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
            gxp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += contrib
    if pad:
        gxp = gxp[:, :, pad : pad + h, pad : pad + wd]
    return np.ascontiguousarray(gxp), grad_w, grad_b


def zono_bounds(center, gens):
    """Row-wise L1 bounds. center (B, n), gens (B, m, n) -> (lower, upper)."""
    radius = np.abs(gens).sum(axis=1)
    return center - radius, center + radius
