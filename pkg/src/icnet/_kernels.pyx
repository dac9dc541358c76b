# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot kernels.

Signatures and summation order mirror ``_fallback`` exactly; see that module
for the contracts.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef fused real:
    float
    double


def _im2col(real[:, :, :, ::1] xp, real[:, ::1] cols, int k, int stride,
            int out_h, int out_w):
    cdef Py_ssize_t n, oi, oj, ki, kj, c, row, col
    cdef Py_ssize_t nb = xp.shape[0], nc = xp.shape[3]
    with nogil:
        for n in range(nb):
            for oi in range(out_h):
                for oj in range(out_w):
                    row = (n * out_h + oi) * out_w + oj
                    col = 0
                    for ki in range(k):
                        for kj in range(k):
                            for c in range(nc):
                                cols[row, col] = xp[n, oi * stride + ki, oj * stride + kj, c]
                                col += 1


def im2col(xp, int k, int stride, int out_h, int out_w):
    xp = np.ascontiguousarray(xp)
    cols = np.empty((xp.shape[0] * out_h * out_w, k * k * xp.shape[3]), dtype=xp.dtype)
    _im2col(xp, cols, k, stride, out_h, out_w)
    return cols


def _col2im(real[:, ::1] cols, real[:, :, :, ::1] out, int k, int stride,
            int out_h, int out_w):
    cdef Py_ssize_t n, oi, oj, ki, kj, c, row, col0
    cdef Py_ssize_t nb = out.shape[0], nc = out.shape[3]
    with nogil:
        for ki in range(k):
            for kj in range(k):
                col0 = (ki * k + kj) * nc
                for n in range(nb):
                    for oi in range(out_h):
                        for oj in range(out_w):
                            row = (n * out_h + oi) * out_w + oj
                            for c in range(nc):
                                out[n, oi * stride + ki, oj * stride + kj, c] += cols[row, col0 + c]


def col2im(cols, padded_shape, int k, int stride, int out_h, int out_w):
    cols = np.ascontiguousarray(cols)
    out = np.zeros(padded_shape, dtype=cols.dtype)
    _col2im(cols, out, k, stride, out_h, out_w)
    return out


def _box_sum(real[:, :, :, ::1] xp, real[:, :, :, ::1] out, int k, int stride):
    cdef Py_ssize_t n, oi, oj, ki, kj, c
    cdef Py_ssize_t nb = out.shape[0], oh = out.shape[1], ow = out.shape[2], nc = out.shape[3]
    with nogil:
        for n in range(nb):
            for oi in range(oh):
                for oj in range(ow):
                    for ki in range(k):
                        for kj in range(k):
                            for c in range(nc):
                                out[n, oi, oj, c] += xp[n, oi * stride + ki, oj * stride + kj, c]


def box_sum(xp, int k, int stride, int out_h, int out_w):
    xp = np.ascontiguousarray(xp)
    out = np.zeros((xp.shape[0], out_h, out_w, xp.shape[3]), dtype=xp.dtype)
    _box_sum(xp, out, k, stride)
    return out


def _box_sum_adjoint(real[:, :, :, ::1] g, real[:, :, :, ::1] out, int k, int stride):
    cdef Py_ssize_t n, oi, oj, ki, kj, c
    cdef Py_ssize_t nb = g.shape[0], oh = g.shape[1], ow = g.shape[2], nc = g.shape[3]
    with nogil:
        for ki in range(k):
            for kj in range(k):
                for n in range(nb):
                    for oi in range(oh):
                        for oj in range(ow):
                            for c in range(nc):
                                out[n, oi * stride + ki, oj * stride + kj, c] += g[n, oi, oj, c]


def box_sum_adjoint(g, padded_shape, int k, int stride):
    g = np.ascontiguousarray(g)
    out = np.zeros(padded_shape, dtype=g.dtype)
    _box_sum_adjoint(g, out, k, stride)
    return out


def _ic_combine(real[:, ::1] u, real[:, ::1] r, double alpha_in, real[::1] b1, real[::1] b2,
                real[:, ::1] out, real[:, ::1] branch, unsigned char[:, ::1] gate):
    cdef Py_ssize_t i, c
    cdef real h, v
    cdef real alpha = <real>alpha_in
    with nogil:
        for i in range(u.shape[0]):
            for c in range(u.shape[1]):
                h = u[i, c] - r[i, c]
                h = h + b1[c]
                if h > 0:
                    gate[i, c] = 1
                    branch[i, c] = h
                else:
                    gate[i, c] = 0
                    branch[i, c] = 0
                v = branch[i, c] * alpha
                v = v + u[i, c]
                out[i, c] = v + b2[c]


def ic_combine(u, r, alpha, b1, b2):
    shape = u.shape
    nc = shape[len(shape) - 1]
    u2 = np.ascontiguousarray(u).reshape(-1, nc)
    r2 = np.ascontiguousarray(r).reshape(-1, nc)
    out = np.empty_like(u2)
    branch = np.empty_like(u2)
    gate = np.empty(u2.shape, dtype=np.uint8)
    _ic_combine(u2, r2, float(alpha), np.ascontiguousarray(b1, dtype=u2.dtype),
                np.ascontiguousarray(b2, dtype=u2.dtype), out, branch, gate)
    return out.reshape(shape), branch.reshape(shape), gate.view(np.bool_).reshape(shape)
