"""Integrating multi-scale attention block.

Each branch runs a dilated 3x3 conv (padding = dilation, so spatial size is
kept), merges channels with a 1x1 conv, turns the result into a per-channel
spatial softmax gate and adds that gate back onto the block input. Branch
outputs are concatenated in dilation order and projected with 1x1 conv + ReLU.

Parameters are passed as a flat dict of (weight, bias) pairs keyed
``branch<i>.dconv``, ``branch<i>.merge`` and ``proj``.
"""

from dataclasses import dataclass

import numpy as np

from mcnet.layers import (
    ConvSpec,
    conv2d_backward,
    conv2d_forward_cols,
    relu,
    relu_backward,
    softmax,
    softmax_backward,
)
from mcnet.tensor import ShapeError, as_batch


@dataclass(frozen=True)
class ImaBranchSpec:
    channels: int
    dilation: int
    kernel: int = 3

    def __post_init__(self):
        if self.channels < 1 or self.dilation < 1:
            raise ValueError("branch channels and dilation must be >= 1")
        if self.kernel != 3:
            raise ValueError("IMA branches use 3x3 dilated kernels")

    @property
    def effective_kernel(self):
        return self.kernel + (self.kernel - 1) * (self.dilation - 1)

    @property
    def dconv(self):
        return ConvSpec(self.channels, self.channels, 3, padding=self.dilation,
                        dilation=self.dilation)

    @property
    def merge(self):
        return ConvSpec(self.channels, self.channels, 1)


@dataclass(frozen=True)
class ImaSpec:
    channels: int
    dilations: tuple = (1, 2, 3)
    project_out: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        if not self.project_out:
            object.__setattr__(self, "project_out", self.channels)
        if not self.dilations:
            raise ValueError("IMA needs at least one branch")
        if len(set(self.dilations)) != len(self.dilations):
            raise ValueError(f"IMA dilations must be distinct, got {self.dilations}")
        if min(self.dilations) < 1 or self.channels < 1 or self.project_out < 1:
            raise ValueError("IMA channels, dilations and projection width must be >= 1")

    @property
    def branches(self):
        return [ImaBranchSpec(self.channels, d) for d in self.dilations]

    @property
    def proj(self):
        return ConvSpec(self.project_out, self.channels * len(self.dilations), 1)

    def conv_specs(self):
        """Every conv inside the block, keyed by its parameter prefix."""
        out = {}
        for i, b in enumerate(self.branches):
            out[f"branch{i}.dconv"] = b.dconv
            out[f"branch{i}.merge"] = b.merge
        out["proj"] = self.proj
        return out


def _branch_params(params, i):
    return {"dconv": params[f"branch{i}.dconv"], "merge": params[f"branch{i}.merge"]}


def ima_branch_forward(x, branch, params, cache=None):
    """One branch; ``params`` holds "dconv" and "merge" (weight, bias) pairs."""
    xb, single = as_batch(x)
    if xb.shape[1] != branch.channels:
        raise ShapeError(f"IMA branch expects {branch.channels} channels, got {xb.shape[1]}")
    x1, cols1 = conv2d_forward_cols(xb, branch.dconv, *params["dconv"])
    x2, cols2 = conv2d_forward_cols(x1, branch.merge, *params["merge"])
    att = softmax(x2, "spatial")
    y = att + xb
    if cache is not None:
        cache.update(x=xb, x1=x1, att=att, cols=(cols1, cols2))
    return y[0] if single else y


def ima_branch_backward(cache, branch, params, grad_out):
    """Returns (grad_x, {"dconv": (gw, gb), "merge": (gw, gb)}) for batched grad_out."""
    g_x2 = softmax_backward(cache["att"], grad_out, "spatial")
    cols1, cols2 = cache["cols"]
    g_x1, gw_m, gb_m = conv2d_backward(cache["x1"], branch.merge, params["merge"][0], g_x2, cols2)
    g_xd, gw_d, gb_d = conv2d_backward(cache["x"], branch.dconv, params["dconv"][0], g_x1, cols1)
    return grad_out + g_xd, {"dconv": (gw_d, gb_d), "merge": (gw_m, gb_m)}


def ima_forward(x, spec, params, cache=None):
    xb, single = as_batch(x)
    if xb.shape[1] != spec.channels:
        raise ShapeError(f"IMA expects {spec.channels} channels, got {xb.shape[1]}")
    branch_caches = []
    outs = []
    for i, branch in enumerate(spec.branches):
        bc = {}
        outs.append(ima_branch_forward(xb, branch, _branch_params(params, i), bc))
        branch_caches.append(bc)
    cat = np.concatenate(outs, axis=1)
    z, cols = conv2d_forward_cols(cat, spec.proj, *params["proj"])
    if cache is not None:
        cache.update(branches=branch_caches, cat=cat, z=z, cols=cols, single=single)
    y = relu(z)
    return y[0] if single else y


def ima_backward(cache, spec, params, grad_out):
    """Returns (grad_x, grads) with grads keyed like ``params``."""
    single = cache["single"]
    g = grad_out[None] if single else grad_out
    gz = relu_backward(cache["z"], g)
    g_cat, gw_p, gb_p = conv2d_backward(cache["cat"], spec.proj, params["proj"][0], gz, cache["cols"])
    grads = {"proj": (gw_p, gb_p)}
    c = spec.channels
    g_x = None
    for i, branch in enumerate(spec.branches):
        gx_i, bg = ima_branch_backward(cache["branches"][i], branch, _branch_params(params, i),
                                       g_cat[:, i * c:(i + 1) * c])
        grads[f"branch{i}.dconv"] = bg["dconv"]
        grads[f"branch{i}.merge"] = bg["merge"]
        g_x = gx_i if g_x is None else g_x + gx_i
    return (g_x[0] if single else g_x), grads


def attention_maps(x, spec, params):
    """Per-branch gate maps (same shape as ``x``) for inspection and tests."""
    cache = {}
    ima_forward(x, spec, params, cache)
    maps = [bc["att"] for bc in cache["branches"]]
    return [m[0] for m in maps] if x.ndim == 3 else maps
