# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled inner loops for convolution buffers and max pooling.

im2col/col2im move data between the (T, H, W, C) activation layout and the
GEMM buffer layout; these copies and the pooling argmax/scatter are the
memory-bound portions of the hot path. GEMMs themselves stay in BLAS.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

ctypedef fused real:
    float
    double


cpdef void im2col(real[:, :, :, ::1] xs, Py_ssize_t kt, Py_ssize_t kh, Py_ssize_t kw,
                  Py_ssize_t t0, Py_ssize_t t1, real[:, ::1] cols) nogil:
    cdef Py_ssize_t ho = xs.shape[1] - kh + 1
    cdef Py_ssize_t wo = xs.shape[2] - kw + 1
    cdef Py_ssize_t ci = xs.shape[3]
    cdef Py_ssize_t r = 0
    cdef Py_ssize_t tt, hh, ww, dt, dh, dw, c, col
    for tt in range(t0, t1):
        for hh in range(ho):
            for ww in range(wo):
                col = 0
                for dt in range(kt):
                    for dh in range(kh):
                        for dw in range(kw):
                            for c in range(ci):
                                cols[r, col] = xs[tt + dt, hh + dh, ww + dw, c]
                                col += 1
                r += 1


cpdef void col2im(real[:, ::1] cols, Py_ssize_t kt, Py_ssize_t kh, Py_ssize_t kw,
                  Py_ssize_t t0, Py_ssize_t t1, real[:, :, :, ::1] xs_grad) nogil:
    cdef Py_ssize_t ho = xs_grad.shape[1] - kh + 1
    cdef Py_ssize_t wo = xs_grad.shape[2] - kw + 1
    cdef Py_ssize_t ci = xs_grad.shape[3]
    cdef Py_ssize_t r = 0
    cdef Py_ssize_t tt, hh, ww, dt, dh, dw, c, col
    for tt in range(t0, t1):
        for hh in range(ho):
            for ww in range(wo):
                col = 0
                for dt in range(kt):
                    for dh in range(kh):
                        for dw in range(kw):
                            for c in range(ci):
                                xs_grad[tt + dt, hh + dh, ww + dw, c] += cols[r, col]
                                col += 1
                r += 1


cpdef void maxpool_forward(real[:, :, :, :, ::1] x, real[:, :, :, :, ::1] out,
                           signed char[:, :, :, :, ::1] idx) nogil:
    cdef Py_ssize_t b = x.shape[0], t = x.shape[1], h = x.shape[2], w = x.shape[3], c = x.shape[4]
    cdef Py_ssize_t i, j, p, q, k
    cdef real v, best
    cdef signed char pos, bestpos
    for i in range(b):
        for j in range(t):
            for p in range(h // 2):
                for q in range(w // 2):
                    for k in range(c):
                        best = x[i, j, 2 * p, 2 * q, k]
                        bestpos = 0
                        v = x[i, j, 2 * p, 2 * q + 1, k]
                        if v > best:
                            best = v
                            bestpos = 1
                        v = x[i, j, 2 * p + 1, 2 * q, k]
                        if v > best:
                            best = v
                            bestpos = 2
                        v = x[i, j, 2 * p + 1, 2 * q + 1, k]
                        if v > best:
                            best = v
                            bestpos = 3
                        out[i, j, p, q, k] = best
                        idx[i, j, p, q, k] = bestpos


cpdef void maxpool_backward(real[:, :, :, :, ::1] g, signed char[:, :, :, :, ::1] idx,
                            real[:, :, :, :, ::1] dx) nogil:
    cdef Py_ssize_t b = g.shape[0], t = g.shape[1], h2 = g.shape[2], w2 = g.shape[3], c = g.shape[4]
    cdef Py_ssize_t i, j, p, q, k
    cdef signed char pos
    for i in range(b):
        for j in range(t):
            for p in range(h2):
                for q in range(w2):
                    for k in range(c):
                        pos = idx[i, j, p, q, k]
                        dx[i, j, 2 * p + (pos >> 1), 2 * q + (pos & 1), k] += g[i, j, p, q, k]
