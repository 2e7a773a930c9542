"""Numpy implementations of the loop kernels.

Used when the compiled extension is unavailable. Accumulation order in
``col2im`` and ``maxpool_backward`` mirrors the compiled loops, so both
backends produce bit-identical arrays.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _out_dim(n, k, stride, pad, dil):
    return (n + 2 * pad - (k + (k - 1) * (dil - 1))) // stride + 1


def im2col(x, k, stride, pad, dil):
    N, C, H, W = x.shape
    ho = _out_dim(H, k, stride, pad, dil)
    wo = _out_dim(W, k, stride, pad, dil)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((N, C, k, k, ho, wo), dtype=x.dtype)
    h_span = stride * (ho - 1) + 1
    w_span = stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            h0, w0 = i * dil, j * dil
            cols[:, :, i, j] = xp[:, :, h0:h0 + h_span:stride, w0:w0 + w_span:stride]
    return cols.reshape(N, C * k * k, ho * wo)


def col2im(cols, x_shape, k, stride, pad, dil):
    N, C, H, W = x_shape
    ho = _out_dim(H, k, stride, pad, dil)
    wo = _out_dim(W, k, stride, pad, dil)
    cols = cols.reshape(N, C, k, k, ho, wo)
    out = np.zeros((N, C, H + 2 * pad, W + 2 * pad), dtype=cols.dtype)
    h_span = stride * (ho - 1) + 1
    w_span = stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            h0, w0 = i * dil, j * dil
            out[:, :, h0:h0 + h_span:stride, w0:w0 + w_span:stride] += cols[:, :, i, j]
    if pad:
        out = out[:, :, pad:pad + H, pad:pad + W]
    return np.ascontiguousarray(out)


def maxpool_forward(x, k, stride):
    N, C, H, W = x.shape
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    flat = win.reshape(N, C, ho, wo, k * k)
    # argmax returns the first hit, i.e. the lowest flat index on ties
    local = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]
    li, lj = np.divmod(local, k)
    rows = np.arange(ho)[:, None] * stride + li
    cols = np.arange(wo)[None, :] * stride + lj
    return np.ascontiguousarray(y), (rows * W + cols).astype(np.int64)


def maxpool_backward(grad_y, argmax, x_shape):
    N, C, H, W = x_shape
    out = np.zeros((N * C, H * W), dtype=grad_y.dtype)
    base = (np.arange(N * C) * (H * W))[:, None]
    flat_idx = (argmax.reshape(N * C, -1) + base).ravel()
    np.add.at(out.ravel(), flat_idx, grad_y.reshape(-1))
    return out.reshape(N, C, H, W)
