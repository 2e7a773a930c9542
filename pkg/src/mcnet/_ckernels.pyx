# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled loop kernels: patch extraction for convolution and max pooling.

Same contracts as :mod:`mcnet._pykernels`; results are bit-identical.
"""
import numpy as np

cimport numpy as cnp
from cython cimport floating
from libc.string cimport memcpy, memset

cnp.import_array()


def _out_dim(Py_ssize_t n, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad, Py_ssize_t dil):
    return (n + 2 * pad - (k + (k - 1) * (dil - 1))) // stride + 1


cdef inline Py_ssize_t _ceil_div(Py_ssize_t a, Py_ssize_t b) nogil:
    # b > 0; rounds toward +inf for either sign of a
    if a >= 0:
        return (a + b - 1) // b
    return -((-a) // b)


cdef inline Py_ssize_t _clamp(Py_ssize_t v, Py_ssize_t lo, Py_ssize_t hi) nogil:
    return lo if v < lo else (hi if v > hi else v)


def _im2col(floating[:, :, :, ::1] x, floating[:, :, ::1] cols,
            Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad, Py_ssize_t dil,
            Py_ssize_t ho, Py_ssize_t wo):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t n, c, i, j, oh, ow, h, off, lo, hi
    cdef floating* dst
    cdef floating* src
    with nogil:
        for n in range(N):
            for c in range(C):
                for i in range(k):
                    for j in range(k):
                        off = j * dil - pad
                        # output columns whose input column ow*stride + off lies in [0, W)
                        lo = _clamp(_ceil_div(-off, stride), 0, wo)
                        hi = _clamp(_ceil_div(W - off, stride), lo, wo)
                        for oh in range(ho):
                            dst = &cols[n, (c * k + i) * k + j, oh * wo]
                            h = oh * stride - pad + i * dil
                            if h < 0 or h >= H:
                                memset(dst, 0, wo * sizeof(floating))
                                continue
                            src = &x[n, c, h, 0]
                            memset(dst, 0, lo * sizeof(floating))
                            if stride == 1:
                                memcpy(dst + lo, src + lo + off, (hi - lo) * sizeof(floating))
                            else:
                                for ow in range(lo, hi):
                                    dst[ow] = src[ow * stride + off]
                            memset(dst + hi, 0, (wo - hi) * sizeof(floating))


def im2col(x, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad, Py_ssize_t dil):
    x = np.ascontiguousarray(x)
    N, C, H, W = x.shape
    ho = _out_dim(H, k, stride, pad, dil)
    wo = _out_dim(W, k, stride, pad, dil)
    cols = np.empty((N, C * k * k, ho * wo), dtype=x.dtype)
    _im2col(x, cols, k, stride, pad, dil, ho, wo)
    return cols


def _col2im(floating[:, :, ::1] cols, floating[:, :, :, ::1] out,
            Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad, Py_ssize_t dil,
            Py_ssize_t ho, Py_ssize_t wo):
    cdef Py_ssize_t N = out.shape[0], C = out.shape[1], H = out.shape[2], W = out.shape[3]
    cdef Py_ssize_t n, c, i, j, oh, ow, h, off, lo, hi
    cdef floating* dst
    cdef floating* src
    with nogil:
        for n in range(N):
            for c in range(C):
                for i in range(k):
                    for j in range(k):
                        off = j * dil - pad
                        lo = _clamp(_ceil_div(-off, stride), 0, wo)
                        hi = _clamp(_ceil_div(W - off, stride), lo, wo)
                        for oh in range(ho):
                            h = oh * stride - pad + i * dil
                            if h < 0 or h >= H:
                                continue
                            src = &cols[n, (c * k + i) * k + j, oh * wo]
                            dst = &out[n, c, h, 0]
                            for ow in range(lo, hi):
                                dst[ow * stride + off] += src[ow]


def col2im(cols, x_shape, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad, Py_ssize_t dil):
    cols = np.ascontiguousarray(cols)
    N, C, H, W = x_shape
    ho = _out_dim(H, k, stride, pad, dil)
    wo = _out_dim(W, k, stride, pad, dil)
    out = np.zeros((N, C, H, W), dtype=cols.dtype)
    _col2im(cols, out, k, stride, pad, dil, ho, wo)
    return out


def _maxpool_fwd(floating[:, :, :, ::1] x, floating[:, :, :, ::1] y,
                 cnp.int64_t[:, :, :, ::1] idx, Py_ssize_t k, Py_ssize_t stride):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], W = x.shape[3]
    cdef Py_ssize_t ho = y.shape[2], wo = y.shape[3]
    cdef Py_ssize_t n, c, oh, ow, i, j, h, w, best_at
    cdef floating best, v
    with nogil:
        for n in range(N):
            for c in range(C):
                for oh in range(ho):
                    for ow in range(wo):
                        h = oh * stride
                        w = ow * stride
                        best = x[n, c, h, w]
                        best_at = h * W + w
                        for i in range(k):
                            for j in range(k):
                                v = x[n, c, h + i, w + j]
                                # strict > keeps the lowest flat index on ties
                                if v > best:
                                    best = v
                                    best_at = (h + i) * W + w + j
                        y[n, c, oh, ow] = best
                        idx[n, c, oh, ow] = best_at


def maxpool_forward(x, Py_ssize_t k, Py_ssize_t stride):
    x = np.ascontiguousarray(x)
    N, C, H, W = x.shape
    ho = (H - k) // stride + 1
    wo = (W - k) // stride + 1
    y = np.empty((N, C, ho, wo), dtype=x.dtype)
    idx = np.empty((N, C, ho, wo), dtype=np.int64)
    _maxpool_fwd(x, y, idx, k, stride)
    return y, idx


def _maxpool_bwd(floating[:, :, :, ::1] g, cnp.int64_t[:, :, :, ::1] idx,
                 floating[:, ::1] out):
    cdef Py_ssize_t N = g.shape[0], C = g.shape[1], ho = g.shape[2], wo = g.shape[3]
    cdef Py_ssize_t n, c, oh, ow
    with nogil:
        for n in range(N):
            for c in range(C):
                for oh in range(ho):
                    for ow in range(wo):
                        out[n * C + c, idx[n, c, oh, ow]] += g[n, c, oh, ow]


def maxpool_backward(grad_y, argmax, x_shape):
    grad_y = np.ascontiguousarray(grad_y)
    argmax = np.ascontiguousarray(argmax, dtype=np.int64)
    N, C, H, W = x_shape
    out = np.zeros((N * C, H * W), dtype=grad_y.dtype)
    _maxpool_bwd(grad_y, argmax, out)
    return out.reshape(N, C, H, W)
