# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled convolution/pooling kernels (hot inner loops).

Mirrors the API of `_kernels_py`; `se2vae.backend` picks whichever is
available at import time.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef fused floating:
    float
    double


def im2col(floating[:, :, :, ::1] x, int k, int stride, int pad):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - k) // stride + 1
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    out = np.zeros((b, c * k * k, ho * wo), dtype=dtype)
    cdef floating[:, :, ::1] o = out
    cdef Py_ssize_t bi, ci, ki, kj, oi, oj, ii, jj, row
    for bi in range(b):
        for ci in range(c):
            for ki in range(k):
                for kj in range(k):
                    row = (ci * k + ki) * k + kj
                    for oi in range(ho):
                        ii = oi * stride + ki - pad
                        if ii < 0 or ii >= h:
                            continue
                        for oj in range(wo):
                            jj = oj * stride + kj - pad
                            if 0 <= jj < w:
                                o[bi, row, oi * wo + oj] = x[bi, ci, ii, jj]
    return out


def col2im(floating[:, :, ::1] cols, int h, int w, int k, int stride, int pad):
    cdef Py_ssize_t b = cols.shape[0]
    cdef Py_ssize_t c = cols.shape[1] // (k * k)
    cdef Py_ssize_t ho = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - k) // stride + 1
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    out = np.zeros((b, c, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] o = out
    cdef Py_ssize_t bi, ci, ki, kj, oi, oj, ii, jj, row
    for bi in range(b):
        for ci in range(c):
            for ki in range(k):
                for kj in range(k):
                    row = (ci * k + ki) * k + kj
                    for oi in range(ho):
                        ii = oi * stride + ki - pad
                        if ii < 0 or ii >= h:
                            continue
                        for oj in range(wo):
                            jj = oj * stride + kj - pad
                            if 0 <= jj < w:
                                o[bi, ci, ii, jj] += cols[bi, row, oi * wo + oj]
    return out


def maxpool(floating[:, :, :, ::1] x, int kh, int kw, int sh, int sw,
            int ph, int pw):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h + 2 * ph - kh) // sh + 1
    cdef Py_ssize_t wo = (w + 2 * pw - kw) // sw + 1
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    out = np.empty((b, c, ho, wo), dtype=dtype)
    idx = np.zeros((b, c, ho, wo), dtype=np.int32)
    cdef floating[:, :, :, ::1] o = out
    cdef int[:, :, :, ::1] ix = idx
    cdef Py_ssize_t bi, ci, oi, oj, ki, kj, ii, jj
    cdef floating best, v
    cdef int besti, found
    for bi in range(b):
        for ci in range(c):
            for oi in range(ho):
                for oj in range(wo):
                    best = 0
                    besti = 0
                    found = 0
                    for ki in range(kh):
                        ii = oi * sh + ki - ph
                        if ii < 0 or ii >= h:
                            continue
                        for kj in range(kw):
                            jj = oj * sw + kj - pw
                            if jj < 0 or jj >= w:
                                continue
                            v = x[bi, ci, ii, jj]
                            if not found or v > best:
                                best = v
                                besti = ki * kw + kj
                                found = 1
                    o[bi, ci, oi, oj] = best
                    ix[bi, ci, oi, oj] = besti
    return out, idx


def maxpool_backward(floating[:, :, :, ::1] g, int[:, :, :, ::1] idx,
                     int h, int w, int kh, int kw, int sh, int sw,
                     int ph, int pw):
    cdef Py_ssize_t b = g.shape[0], c = g.shape[1], ho = g.shape[2], wo = g.shape[3]
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    out = np.zeros((b, c, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] o = out
    cdef Py_ssize_t bi, ci, oi, oj, ii, jj
    cdef int wi
    for bi in range(b):
        for ci in range(c):
            for oi in range(ho):
                for oj in range(wo):
                    wi = idx[bi, ci, oi, oj]
                    ii = oi * sh + wi // kw - ph
                    jj = oj * sw + wi % kw - pw
                    o[bi, ci, ii, jj] += g[bi, ci, oi, oj]
    return out
