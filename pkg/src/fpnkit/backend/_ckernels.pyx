# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled convolution lowering kernels (im2col / col2im).

Loop order inside col2im is (n, c, i, j, oh, ow) so each output element
accumulates its contributions in ascending kernel-offset order, matching the
numpy fallback bit for bit.
"""

import numpy as np

cimport cython

name = "cython"

ctypedef fused floating:
    float
    double


def im2col(floating[:, :, :, ::1] xp, int kh, int kw, int stride):
    cdef Py_ssize_t n = xp.shape[0]
    cdef Py_ssize_t c = xp.shape[1]
    cdef Py_ssize_t hp = xp.shape[2]
    cdef Py_ssize_t wp = xp.shape[3]
    cdef Py_ssize_t oh = (hp - kh) // stride + 1
    cdef Py_ssize_t ow = (wp - kw) // stride + 1

    if floating is float:
        out = np.empty((n, c * kh * kw, oh * ow), dtype=np.float32)
    else:
        out = np.empty((n, c * kh * kw, oh * ow), dtype=np.float64)
    cdef floating[:, :, ::1] cols = out

    cdef Py_ssize_t b, ch, i, j, a, w, row
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        for a in range(oh):
                            for w in range(ow):
                                cols[b, row, a * ow + w] = xp[b, ch, a * stride + i, w * stride + j]
    return out


def col2im(floating[:, :, ::1] cols, int hp, int wp, int kh, int kw, int stride):
    cdef Py_ssize_t n = cols.shape[0]
    cdef Py_ssize_t c = cols.shape[1] // (kh * kw)
    cdef Py_ssize_t oh = (hp - kh) // stride + 1
    cdef Py_ssize_t ow = (wp - kw) // stride + 1

    if floating is float:
        out = np.zeros((n, c, hp, wp), dtype=np.float32)
    else:
        out = np.zeros((n, c, hp, wp), dtype=np.float64)
    cdef floating[:, :, :, ::1] xp = out

    cdef Py_ssize_t b, ch, i, j, a, w, row
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        for a in range(oh):
                            for w in range(ow):
                                xp[b, ch, a * stride + i, w * stride + j] += cols[b, row, a * ow + w]
    return out
