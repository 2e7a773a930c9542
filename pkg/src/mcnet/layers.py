"""Forward and backward passes for the primitive layers.

All feature maps are channels-first, either C x H x W or N x C x H x W; the
output rank always matches the input rank. Convolution is cross-correlation
with zero padding, computed by patch-matrix restructuring on the selected
kernel backend (see :mod:`mcnet.kernels`).
"""

from dataclasses import dataclass

import numpy as np

from mcnet import kernels
from mcnet.tensor import ShapeError, as_batch


def _unbatch(y, single):
    return y[0] if single else y


@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    in_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    has_bias: bool = True

    def __post_init__(self):
        for name in ("out_channels", "in_channels", "kernel", "stride", "dilation"):
            if getattr(self, name) < 1:
                raise ValueError(f"ConvSpec.{name} must be >= 1")
        if self.padding < 0:
            raise ValueError("ConvSpec.padding must be >= 0")

    @property
    def effective_kernel(self):
        return self.kernel + (self.kernel - 1) * (self.dilation - 1)

    def out_dim(self, n):
        return (n + 2 * self.padding - self.effective_kernel) // self.stride + 1

    @property
    def weight_dims(self):
        return (self.out_channels, self.in_channels, self.kernel, self.kernel)

    @property
    def fan_in(self):
        return self.in_channels * self.kernel * self.kernel

    @property
    def param_count(self):
        return self.out_channels * self.fan_in + (self.out_channels if self.has_bias else 0)


@dataclass(frozen=True)
class PoolSpec:
    kind: str = "max"
    window: int = 2
    stride: int = 2

    def __post_init__(self):
        if self.kind not in ("max", "global_average"):
            raise ValueError(f"unknown pool kind {self.kind!r}")
        if self.window < 1 or self.stride < 1:
            raise ValueError("pool window and stride must be >= 1")

    def out_dim(self, n):
        return (n - self.window) // self.stride + 1


@dataclass(frozen=True)
class FireSpec:
    squeeze: int
    expand1: int
    expand3: int

    def __post_init__(self):
        if min(self.squeeze, self.expand1, self.expand3) < 1:
            raise ValueError("fire widths must be >= 1")

    @property
    def out_channels(self):
        return self.expand1 + self.expand3

    def convs(self, in_channels):
        """The squeeze, expand-1x1 and expand-3x3 convolutions, in that order."""
        return {
            "squeeze": ConvSpec(self.squeeze, in_channels, 1),
            "expand1": ConvSpec(self.expand1, self.squeeze, 1),
            "expand3": ConvSpec(self.expand3, self.squeeze, 3, padding=1),
        }


# -- convolution -----------------------------------------------------------

def _check_conv(x, spec, weights):
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"conv expects {spec.in_channels} input channels, got {x.shape[1]}")
    if weights.shape != spec.weight_dims:
        raise ShapeError(f"conv weights {weights.shape} != {spec.weight_dims}")
    ho, wo = spec.out_dim(x.shape[2]), spec.out_dim(x.shape[3])
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"effective kernel {spec.effective_kernel} exceeds padded input {x.shape[2:]}"
        )
    return ho, wo


def conv2d_forward_cols(x, spec, weights, bias=None):
    """Batched conv returning (y, patch matrix) so backward can reuse the patches."""
    ho, wo = _check_conv(x, spec, weights)
    k = spec.kernel
    if k == 1 and spec.stride == 1 and spec.padding == 0:
        cols = x.reshape(x.shape[0], x.shape[1], -1)
    else:
        cols = kernels.im2col(x, k, spec.stride, spec.padding, spec.dilation)
    w2 = weights.reshape(spec.out_channels, -1)
    y = np.matmul(w2, cols)
    if bias is not None:
        y += bias.reshape(1, -1, 1)
    return y.reshape(x.shape[0], spec.out_channels, ho, wo), cols


def conv2d_forward(x, spec, weights, bias=None):
    xb, single = as_batch(x)
    if bias is not None and spec.has_bias is False:
        raise ValueError("bias given for a bias-free ConvSpec")
    y, _ = conv2d_forward_cols(xb, spec, weights, bias)
    return _unbatch(y, single)


def conv2d_backward(x, spec, weights, grad_out, cols=None):
    """Returns (grad_x, grad_w, grad_b); grad_b is None when the spec has no bias."""
    xb, single = as_batch(x)
    gb = grad_out[None] if single else grad_out
    ho, wo = _check_conv(xb, spec, weights)
    n = xb.shape[0]
    if gb.shape != (n, spec.out_channels, ho, wo):
        raise ShapeError(f"grad_out {grad_out.shape} does not match conv output")
    k = spec.kernel
    direct = k == 1 and spec.stride == 1 and spec.padding == 0
    if cols is None:
        cols = (xb.reshape(n, xb.shape[1], -1) if direct
                else kernels.im2col(xb, k, spec.stride, spec.padding, spec.dilation))
    g = gb.reshape(n, spec.out_channels, -1)
    w2 = weights.reshape(spec.out_channels, -1)
    grad_w = np.zeros_like(w2)
    for i in range(n):  # fixed reduction order over the batch
        grad_w += g[i] @ cols[i].T
    grad_b = g.sum(axis=(0, 2)) if spec.has_bias else None
    gcols = np.matmul(w2.T, g)
    if direct:
        grad_x = gcols.reshape(xb.shape)
    else:
        grad_x = kernels.col2im(gcols, xb.shape, k, spec.stride, spec.padding, spec.dilation)
    return _unbatch(grad_x, single), grad_w.reshape(weights.shape), grad_b


# -- pooling ---------------------------------------------------------------

def maxpool_forward(x, spec):
    """Returns (y, argmax) where argmax holds flat H*W offsets of each winner."""
    xb, single = as_batch(x)
    if spec.window > xb.shape[2] or spec.window > xb.shape[3]:
        raise ShapeError(f"pool window {spec.window} exceeds input {xb.shape[2:]}")
    y, idx = kernels.maxpool_forward(np.ascontiguousarray(xb), spec.window, spec.stride)
    return _unbatch(y, single), _unbatch(idx, single)


def maxpool_backward(grad_out, argmax, x_shape):
    single = len(x_shape) == 3
    g = grad_out[None] if single else grad_out
    a = argmax[None] if single else argmax
    shape = (1, *x_shape) if single else tuple(x_shape)
    return _unbatch(kernels.maxpool_backward(np.ascontiguousarray(g), a, shape), single)


def global_average_pool(x):
    if x.ndim not in (3, 4):
        raise ShapeError(f"global_average_pool expects rank 3 or 4, got {x.ndim}")
    return x.mean(axis=(-2, -1), keepdims=True, dtype=x.dtype)


def global_average_pool_backward(grad_out, x_shape):
    h, w = x_shape[-2], x_shape[-1]
    return np.broadcast_to(grad_out / (h * w), x_shape).astype(grad_out.dtype)


# -- activations -----------------------------------------------------------

def relu(x):
    return np.maximum(x, 0, dtype=x.dtype)


def relu_backward(x, grad_out):
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype)


def _softmax_axes(x, axis):
    if axis == "channel":
        return (0,) if x.ndim in (1, 3) else (1,)
    if axis == "spatial":
        if x.ndim < 2:
            raise ShapeError("spatial softmax needs at least rank 2")
        return (-2, -1)
    raise ValueError(f"softmax axis must be 'channel' or 'spatial', got {axis!r}")


def softmax(x, axis="channel"):
    axes = _softmax_axes(x, axis)
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("softmax input contains non-finite values")
    z = x - x.max(axis=axes, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axes, keepdims=True)


def softmax_backward(y, grad_out, axis="channel"):
    axes = _softmax_axes(y, axis)
    return y * (grad_out - (grad_out * y).sum(axis=axes, keepdims=True))


# -- fire module -----------------------------------------------------------

def fire_forward(x, spec, params, cache=None):
    """Squeeze 1x1 -> ReLU -> [expand 1x1, expand 3x3] -> ReLU -> channel concat.

    ``params`` maps "squeeze"/"expand1"/"expand3" to (weight, bias) pairs.
    Pass a dict as ``cache`` to keep what :func:`fire_backward` needs.
    """
    xb, single = as_batch(x)
    convs = spec.convs(xb.shape[1])
    s_pre, s_cols = conv2d_forward_cols(xb, convs["squeeze"], *params["squeeze"])
    s = relu(s_pre)
    e1_pre, e1_cols = conv2d_forward_cols(s, convs["expand1"], *params["expand1"])
    e3_pre, e3_cols = conv2d_forward_cols(s, convs["expand3"], *params["expand3"])
    y = np.concatenate([relu(e1_pre), relu(e3_pre)], axis=1)
    if cache is not None:
        cache.update(x=xb, s_pre=s_pre, s=s, e1_pre=e1_pre, e3_pre=e3_pre,
                     cols=(s_cols, e1_cols, e3_cols), single=single)
    return _unbatch(y, single)


def fire_backward(cache, spec, params, grad_out):
    """Returns (grad_x, {"squeeze": (gw, gb), "expand1": ..., "expand3": ...})."""
    single = cache["single"]
    g = grad_out[None] if single else grad_out
    xb = cache["x"]
    convs = spec.convs(xb.shape[1])
    s_cols, e1_cols, e3_cols = cache["cols"]
    g1 = relu_backward(cache["e1_pre"], g[:, :spec.expand1])
    g3 = relu_backward(cache["e3_pre"], g[:, spec.expand1:])
    gs1, gw1, gb1 = conv2d_backward(cache["s"], convs["expand1"], params["expand1"][0], g1, e1_cols)
    gs3, gw3, gb3 = conv2d_backward(cache["s"], convs["expand3"], params["expand3"][0], g3, e3_cols)
    gs = relu_backward(cache["s_pre"], gs1 + gs3)
    gx, gws, gbs = conv2d_backward(xb, convs["squeeze"], params["squeeze"][0], gs, s_cols)
    grads = {"squeeze": (gws, gbs), "expand1": (gw1, gb1), "expand3": (gw3, gb3)}
    return _unbatch(gx, single), grads


# -- loss ------------------------------------------------------------------

def softmax_cross_entropy(logits, label):
    """Loss and gradient for one logit vector and an integer class label."""
    logits = np.asarray(logits).reshape(-1)
    if not 0 <= int(label) < logits.shape[0]:
        raise ValueError(f"label {label} out of range for {logits.shape[0]} classes")
    p = softmax(logits.astype(np.float64), "channel")
    loss = -np.log(p[int(label)])
    grad = p.copy()
    grad[int(label)] -= 1.0
    return float(loss), grad.astype(logits.dtype)


def softmax_cross_entropy_batch(logits, labels):
    """Mean loss over rows of ``logits`` (N x K); gradient is scaled by 1/N."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,) or labels.min() < 0 or labels.max() >= k:
        raise ValueError("labels must be N integers in [0, K)")
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), (grad / n).astype(logits.dtype)
