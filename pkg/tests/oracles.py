"""Reference implementations that share no code with the package.

Everything here is written with plain loops or straightforward numpy so
that agreement with the library means something.
"""
from __future__ import annotations

import itertools

import numpy as np


# -- forward pass ------------------------------------------------------------
def naive_conv(x, w, b, stride, pad):
    """x (C, H, W), w (O, C, kh, kw) by explicit loops."""
    c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.zeros((c, h + 2 * pad, wd + 2 * pad))
    xp[:, pad : pad + h, pad : pad + wd] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((o, ho, wo))
    for oc in range(o):
        for i in range(ho):
            for j in range(wo):
                s = 0.0
                for ic in range(c):
                    for a in range(kh):
                        for bb in range(kw):
                            s += w[oc, ic, a, bb] * xp[ic, i * stride + a, j * stride + bb]
                out[oc, i, j] = s + (0.0 if b is None else b[oc])
    return out


def naive_forward(net, x):
    """Forward one example through ``net.layers`` from their raw parameters."""
    h = np.array(x, dtype=np.float64)
    for layer in net.layers:
        if layer.kind == "dense":
            v = h.ravel()
            h = np.array([sum(layer.weight[r, c] * v[c] for c in range(v.size)) + layer.bias[r] for r in range(layer.weight.shape[0])])
        elif layer.kind == "conv":
            h = naive_conv(h, layer.kernel, layer.bias, layer.stride, layer.padding)
        else:
            h = np.where(h > 0, h, 0.0)
    return h


# -- IDX decoding ------------------------------------------------------------
def decode_idx(raw: bytes):
    """Return (magic, dims, flat list of ints) by walking the bytes directly."""
    magic = int.from_bytes(raw[0:4], "big")
    if raw[0] != 0 or raw[1] != 0 or raw[2] != 0x08:
        raise ValueError("not an unsigned-byte IDX file")
    ndim = raw[3]
    dims = [int.from_bytes(raw[4 + 4 * i : 8 + 4 * i], "big") for i in range(ndim)]
    start = 4 + 4 * ndim
    count = 1
    for d in dims:
        count *= d
    values = list(raw[start : start + count])
    if len(values) != count:
        raise ValueError("truncated")
    return magic, dims, values


# -- exact robustness by polygon subdivision (2-D inputs) --------------------
def _clip(poly, a, c, keep_positive):
    """Sutherland-Hodgman clip of a convex polygon against a.x + c >= 0 (or <= 0)."""
    sgn = 1.0 if keep_positive else -1.0
    out = []
    n = len(poly)
    for i in range(n):
        p, q = poly[i], poly[(i + 1) % n]
        fp = sgn * (a @ p + c)
        fq = sgn * (a @ q + c)
        if fp >= 0:
            out.append(p)
        if (fp > 0 > fq) or (fp < 0 < fq):
            t = fp / (fp - fq)
            out.append(p + t * (q - p))
    return out


def region_pieces(net, lo, hi):
    """Split the box [lo, hi] (2-D) into convex pieces on which the network is affine.

    Returns a list of ``(polygon vertices, M, c)`` with logits = M x + c on the piece.
    Walks dense layers only.
    """
    box = [np.array([lo[0], lo[1]]), np.array([hi[0], lo[1]]), np.array([hi[0], hi[1]]), np.array([lo[0], hi[1]])]
    pieces = [(box, np.eye(2), np.zeros(2))]
    for layer in net.layers:
        if layer.kind == "dense":
            pieces = [(poly, layer.weight @ M, layer.weight @ c + layer.bias) for poly, M, c in pieces]
            continue
        if layer.kind != "relu":
            raise NotImplementedError("oracle handles dense/relu nets only")
        for j in range(pieces[0][1].shape[0]):
            nxt = []
            for poly, M, c in pieces:
                for positive in (True, False):
                    sub = _clip(poly, M[j], c[j], positive)
                    # the network is continuous, so a degenerate sliver's vertices
                    # are also vertices of a neighbouring piece
                    if len(sub) >= 3:
                        M2, c2 = M.copy(), c.copy()
                        if not positive:
                            M2[j] = 0.0
                            c2[j] = 0.0
                        nxt.append((sub, M2, c2))
            pieces = nxt
    return pieces


def exact_worst_margin(net, x, y, eps):
    """max over the clipped eps-box of max_{k != y} (z_k - z_y), plus the maximiser."""
    lo = np.maximum(0.0, np.asarray(x) - eps)
    hi = np.minimum(1.0, np.asarray(x) + eps)
    best, arg = -np.inf, None
    for poly, M, c in region_pieces(net, lo, hi):
        for v in poly:
            z = M @ v + c
            diff = np.delete(z - z[y], y)
            if diff.max() > best:
                best, arg = float(diff.max()), v.copy()
    return best, arg


def pattern_count(net):
    """Number of hidden ReLUs (upper bound on unstable neurons)."""
    return sum(layer.weight.shape[0] for layer, nxt in zip(net.layers, net.layers[1:]) if nxt.kind == "relu")


# -- exhaustive sign enumeration ----------------------------------------------
def enumerate_bounds(center, A):
    """Min and max of a + A e over e in {-1, 1}^m, coordinate-wise."""
    n, m = A.shape
    lo = np.full(n, np.inf)
    hi = np.full(n, -np.inf)
    for signs in itertools.product((-1.0, 1.0), repeat=m):
        v = center + A @ np.array(signs)
        lo = np.minimum(lo, v)
        hi = np.maximum(hi, v)
    if m == 0:
        lo = hi = np.array(center, dtype=float)
    return lo, hi
