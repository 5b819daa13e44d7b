# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: patch gathering/scattering for convolution (BLAS does the products) and zonotope bounds."""
import numpy as np
cimport numpy as cnp
from libc.math cimport fabs

cnp.import_array()


cdef inline Py_ssize_t _ky_lo(Py_ssize_t o, Py_ssize_t stride, Py_ssize_t pad) nogil:
    # first kernel offset whose input coordinate o*stride + k - pad is >= 0
    cdef Py_ssize_t t = pad - o * stride
    return t if t > 0 else 0


cdef inline Py_ssize_t _ky_hi(Py_ssize_t o, Py_ssize_t stride, Py_ssize_t pad, Py_ssize_t size, Py_ssize_t k) nogil:
    # one past the last kernel offset whose input coordinate is < size
    cdef Py_ssize_t t = size + pad - o * stride
    return t if t < k else k


def _im2col(double[:, :, :, ::1] xv, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride, Py_ssize_t pad,
            Py_ssize_t ho, Py_ssize_t wo):
    # patch matrix (n*ho*wo, c*kh*kw); padded entries stay zero
    cdef Py_ssize_t n = xv.shape[0], c = xv.shape[1], h = xv.shape[2], wd = xv.shape[3]
    cols = np.zeros((n, ho, wo, c, kh, kw), dtype=np.float64)
    cdef double[:, :, :, :, :, ::1] cv = cols
    cdef Py_ssize_t ni, ci, yi, xi, ky, kx, iy, ix
    with nogil:
        for ni in range(n):
            for yi in range(ho):
                for xi in range(wo):
                    for ci in range(c):
                        for ky in range(_ky_lo(yi, stride, pad), _ky_hi(yi, stride, pad, h, kh)):
                            iy = yi * stride + ky - pad
                            for kx in range(_ky_lo(xi, stride, pad), _ky_hi(xi, stride, pad, wd, kw)):
                                ix = xi * stride + kx - pad
                                cv[ni, yi, xi, ci, ky, kx] = xv[ni, ci, iy, ix]
    return cols.reshape(n * ho * wo, c * kh * kw)


def _col2im(double[:, :, :, :, :, ::1] cv, Py_ssize_t c, Py_ssize_t h, Py_ssize_t wd,
            Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t n = cv.shape[0], ho = cv.shape[1], wo = cv.shape[2], kh = cv.shape[4], kw = cv.shape[5]
    gx = np.zeros((n, c, h, wd), dtype=np.float64)
    cdef double[:, :, :, ::1] gv = gx
    cdef Py_ssize_t ni, ci, yi, xi, ky, kx, iy, ix
    with nogil:
        for ni in range(n):
            for yi in range(ho):
                for xi in range(wo):
                    for ci in range(c):
                        for ky in range(_ky_lo(yi, stride, pad), _ky_hi(yi, stride, pad, h, kh)):
                            iy = yi * stride + ky - pad
                            for kx in range(_ky_lo(xi, stride, pad), _ky_hi(xi, stride, pad, wd, kw)):
                                ix = xi * stride + kx - pad
                                gv[ni, ci, iy, ix] += cv[ni, yi, xi, ci, ky, kx]
    return gx


def conv2d_forward(x, w, b, int stride, int pad):
    cdef double[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], h = xv.shape[2], wd = xv.shape[3]
    cdef Py_ssize_t o = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (wd + 2 * pad - kw) // stride + 1
    cols = _im2col(xv, kh, kw, stride, pad, ho, wo)
    out = cols @ w.reshape(o, -1).T
    if b is not None:
        out += np.asarray(b, dtype=np.float64)
    return np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))


def conv2d_backward(gout, x, w, int stride, int pad, bint need_x=True, bint need_w=True):
    cdef double[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], c = xv.shape[1], h = xv.shape[2], wd = xv.shape[3]
    cdef Py_ssize_t o = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    gout = np.asarray(gout, dtype=np.float64)
    cdef Py_ssize_t ho = gout.shape[2], wo = gout.shape[3]
    g2 = np.ascontiguousarray(gout.transpose(0, 2, 3, 1)).reshape(-1, o)
    gx = gw = gb = None
    if need_w:
        cols = _im2col(xv, kh, kw, stride, pad, ho, wo)
        gw = (g2.T @ cols).reshape(o, c, kh, kw)
        gb = g2.sum(axis=0)
    if need_x:
        gcols = (g2 @ w.reshape(o, -1)).reshape(n, ho, wo, c, kh, kw)
        gx = _col2im(gcols, c, h, wd, stride, pad)
    return gx, gw, gb


def zono_bounds(center, gens):
    cdef double[:, ::1] cv = np.ascontiguousarray(center, dtype=np.float64)
    cdef double[:, :, ::1] gv = np.ascontiguousarray(gens, dtype=np.float64)
    cdef Py_ssize_t bsz = gv.shape[0], m = gv.shape[1], n = gv.shape[2]
    radius = np.zeros((bsz, n), dtype=np.float64)
    cdef double[:, ::1] rv = radius
    cdef Py_ssize_t bi, j, i
    with nogil:
        for bi in range(bsz):
            for j in range(m):
                for i in range(n):
                    rv[bi, i] += fabs(gv[bi, j, i])
    c = np.asarray(cv)
    return c - radius, c + radius
