# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution kernels.

Same call signatures and results as ``_pykernels``; the accumulation orders
are identical so both backends agree bitwise.
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating

cnp.import_array()


def im2col(const floating[:, :, :, ::1] x, int kh, int kw, int pad):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = H + 2 * pad - kh + 1, Wo = W + 2 * pad - kw + 1
    dtype = np.float64 if floating is double else np.float32
    out_arr = np.zeros((B, C * kh * kw, Ho * Wo), dtype=dtype)
    cdef floating[:, :, ::1] out = out_arr
    cdef Py_ssize_t b, c, i, j, yo, xo, yi, row, x0, x1, base
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(kh):
                    for j in range(kw):
                        row = (c * kh + i) * kw + j
                        # output columns whose input column lies inside the image
                        x0 = pad - j if pad > j else 0
                        x1 = W + pad - j if W + pad - j < Wo else Wo
                        for yo in range(Ho):
                            yi = yo + i - pad
                            if yi < 0 or yi >= H:
                                continue
                            base = yo * Wo
                            for xo in range(x0, x1):
                                out[b, row, base + xo] = x[b, c, yi, xo + j - pad]
    return out_arr


def col2im(const floating[:, :, ::1] cols, int B, int C, int H, int W, int kh, int kw, int pad):
    cdef Py_ssize_t Ho = H + 2 * pad - kh + 1, Wo = W + 2 * pad - kw + 1
    dtype = np.float64 if floating is double else np.float32
    out_arr = np.zeros((B, C, H, W), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, c, i, j, yo, xo, yi, row, x0, x1, base
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(kh):
                    for j in range(kw):
                        row = (c * kh + i) * kw + j
                        x0 = pad - j if pad > j else 0
                        x1 = W + pad - j if W + pad - j < Wo else Wo
                        for yo in range(Ho):
                            yi = yo + i - pad
                            if yi < 0 or yi >= H:
                                continue
                            base = yo * Wo
                            for xo in range(x0, x1):
                                out[b, c, yi, xo + j - pad] += cols[b, row, base + xo]
    return out_arr


def conv2d_direct(const floating[:, :, :, ::1] x, const floating[:, :, :, ::1] w,
                  const floating[::1] bias, int pad):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Co = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t Ho = H + 2 * pad - kh + 1, Wo = W + 2 * pad - kw + 1
    dtype = np.float64 if floating is double else np.float32
    out_arr = np.empty((B, Co, Ho, Wo), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, o, yo, xo, c, i, j, yi, xi
    cdef floating acc, xv
    with nogil:
        for b in range(B):
            for o in range(Co):
                for yo in range(Ho):
                    for xo in range(Wo):
                        acc = 0
                        for c in range(C):
                            for i in range(kh):
                                yi = yo + i - pad
                                for j in range(kw):
                                    xi = xo + j - pad
                                    if 0 <= yi < H and 0 <= xi < W:
                                        xv = x[b, c, yi, xi]
                                    else:
                                        xv = 0
                                    acc = acc + w[o, c, i, j] * xv
                        out[b, o, yo, xo] = acc + bias[o]
    return out_arr
