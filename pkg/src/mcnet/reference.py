"""Naive loop implementations used as test oracles.

Deliberately slow and literal: every kernel tap is an explicit multiply,
including taps that land in zero padding, so ``MulCounter`` reproduces the
multiply-accumulate convention of the static analyzer.
"""

import math

import numpy as np


class MulCounter:
    def __init__(self):
        self.count = 0


def conv2d(x, weights, bias, stride, padding, dilation, counter=None):
    """Seven nested loops over a single C x H x W input."""
    c_in, h, w = x.shape
    c_out, _, k, _ = weights.shape
    f = k + (k - 1) * (dilation - 1)
    ho = (h + 2 * padding - f) // stride + 1
    wo = (w + 2 * padding - f) // stride + 1
    out = np.zeros((c_out, ho, wo), dtype=np.float64)
    muls = 0
    for o in range(c_out):
        for oh in range(ho):
            for ow in range(wo):
                acc = 0.0
                for c in range(c_in):
                    for i in range(k):
                        for j in range(k):
                            hh = oh * stride - padding + i * dilation
                            ww = ow * stride - padding + j * dilation
                            v = float(x[c, hh, ww]) if 0 <= hh < h and 0 <= ww < w else 0.0
                            acc += v * float(weights[o, c, i, j])
                            muls += 1
                if bias is not None:
                    acc += float(bias[o])
                out[o, oh, ow] = acc
    if counter is not None:
        counter.count += muls
    return out


def maxpool(x, window, stride):
    c_n, h, w = x.shape
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    out = np.zeros((c_n, ho, wo), dtype=x.dtype)
    idx = np.zeros((c_n, ho, wo), dtype=np.int64)
    for c in range(c_n):
        for oh in range(ho):
            for ow in range(wo):
                best, best_at = None, -1
                for i in range(window):
                    for j in range(window):
                        hh, ww = oh * stride + i, ow * stride + j
                        v = x[c, hh, ww]
                        if best is None or v > best:
                            best, best_at = v, hh * w + ww
                out[c, oh, ow] = best
                idx[c, oh, ow] = best_at
    return out, idx


def global_average_pool(x):
    c_n, h, w = x.shape
    out = np.zeros((c_n, 1, 1), dtype=np.float64)
    for c in range(c_n):
        s = 0.0
        for i in range(h):
            for j in range(w):
                s += float(x[c, i, j])
        out[c, 0, 0] = s / (h * w)
    return out


def relu(x):
    return np.array([max(0.0, float(v)) for v in x.ravel()]).reshape(x.shape)


def spatial_softmax(x):
    c_n, h, w = x.shape
    out = np.zeros((c_n, h, w), dtype=np.float64)
    for c in range(c_n):
        m = max(float(v) for v in x[c].ravel())
        total = 0.0
        for i in range(h):
            for j in range(w):
                out[c, i, j] = math.exp(float(x[c, i, j]) - m)
                total += out[c, i, j]
        out[c] /= total
    return out


def fire(x, params):
    """``params``: dict name -> (weight, bias) for squeeze/expand1/expand3."""
    s = relu(conv2d(x, *params["squeeze"], 1, 0, 1))
    e1 = relu(conv2d(s, *params["expand1"], 1, 0, 1))
    e3 = relu(conv2d(s, *params["expand3"], 1, 1, 1))
    return np.concatenate([e1, e3], axis=0)


def ima_branch(x, dconv, merge, dilation):
    x1 = conv2d(x, *dconv, 1, dilation, dilation)
    x2 = conv2d(x1, *merge, 1, 0, 1)
    return spatial_softmax(x2) + x


def ima(x, branches, dilations, proj):
    outs = [ima_branch(x, b["dconv"], b["merge"], d) for b, d in zip(branches, dilations)]
    return relu(conv2d(np.concatenate(outs, axis=0), *proj, 1, 0, 1))


def bilinear_resize(img, out_h, out_w):
    """Half-pixel-centred bilinear sampling on an H x W x C array, edge-clamped."""
    h, w, c_n = img.shape
    out = np.zeros((out_h, out_w, c_n), dtype=np.float64)
    sy, sx = h / out_h, w / out_w
    for oy in range(out_h):
        fy = (oy + 0.5) * sy - 0.5
        fy = min(max(fy, 0.0), h - 1.0)
        y0 = int(math.floor(fy))
        y1 = min(y0 + 1, h - 1)
        ty = fy - y0
        for ox in range(out_w):
            fx = (ox + 0.5) * sx - 0.5
            fx = min(max(fx, 0.0), w - 1.0)
            x0 = int(math.floor(fx))
            x1 = min(x0 + 1, w - 1)
            tx = fx - x0
            for c in range(c_n):
                top = float(img[y0, x0, c]) * (1 - tx) + float(img[y0, x1, c]) * tx
                bot = float(img[y1, x0, c]) * (1 - tx) + float(img[y1, x1, c]) * tx
                out[oy, ox, c] = top * (1 - ty) + bot * ty
    return out
