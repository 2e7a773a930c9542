"""MCNet assembly: parameters, forward/backward over a config, weight files."""

import io
import struct
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np

from mcnet import layers as L
from mcnet.ima import ima_backward, ima_forward
from mcnet.tensor import DTYPE, ShapeError, tensor_random_init, tensor_zeros

WEIGHTS_MAGIC = b"MCNW"
WEIGHTS_VERSION = 1
_HEADER = struct.Struct("<4sIII")  # magic, version, tensor count, reserved


class DensityLevel(IntEnum):
    LOW = 0
    MEDIUM = 1
    HIGH = 2

    @property
    def label(self):
        return self.name.lower()


class WeightsFormatError(ValueError):
    pass


def layer_convs(layer, in_channels):
    """(parameter prefix, ConvSpec) for every conv owned by ``layer``."""
    if layer.kind == "conv":
        return [(layer.name, layer.spec)]
    if layer.kind == "fire":
        return [(f"{layer.name}.{k}", s) for k, s in layer.spec.convs(in_channels).items()]
    if layer.kind == "ima":
        return [(f"{layer.name}.{k}", s) for k, s in layer.spec.conv_specs().items()]
    return []


def param_layout(config):
    """Ordered (tensor name, dims, fan_in) for every parameter the config implies."""
    out = []
    in_shapes = [config.input_shape] + config.shapes()[:-1]
    for layer, shape in zip(config.layers, in_shapes):
        for prefix, spec in layer_convs(layer, shape[0]):
            out.append((f"{prefix}.weight", spec.weight_dims, spec.fan_in))
            if spec.has_bias:
                out.append((f"{prefix}.bias", (spec.out_channels,), spec.fan_in))
    return out


@dataclass
class Model:
    config: object
    params: dict
    grads: dict
    momentum: dict

    @classmethod
    def from_params(cls, config, params):
        grads = {k: np.zeros_like(v) for k, v in params.items()}
        mom = {k: np.zeros_like(v) for k, v in params.items()}
        return cls(config, params, grads, mom)

    @property
    def param_count(self):
        return sum(v.size for v in self.params.values())

    def zero_grads(self):
        for g in self.grads.values():
            g.fill(0)

    def astype(self, dtype):
        return Model.from_params(self.config, {k: v.astype(dtype) for k, v in self.params.items()})

    def copy(self):
        m = Model.from_params(self.config, {k: v.copy() for k, v in self.params.items()})
        for k, v in self.momentum.items():
            m.momentum[k][...] = v
        return m

    def conv_params(self, prefix, spec):
        w = self.params[f"{prefix}.weight"]
        b = self.params.get(f"{prefix}.bias") if spec.has_bias else None
        return w, b

    def _add_grad(self, prefix, gw, gb):
        self.grads[f"{prefix}.weight"] += gw
        if gb is not None:
            self.grads[f"{prefix}.bias"] += gb


def build_model(config, rng):
    """Allocate every parameter: weights uniform fan-in scaled, biases zero."""
    params = {}
    for name, dims, fan_in in param_layout(config):
        if name.endswith(".weight"):
            params[name] = tensor_random_init(dims, fan_in, rng)
        else:
            params[name] = tensor_zeros(dims)
    return Model.from_params(config, params)


# -- forward / backward ----------------------------------------------------

def _block_params(model, layer, in_channels):
    return {prefix[len(layer.name) + 1:]: model.conv_params(prefix, spec)
            for prefix, spec in layer_convs(layer, in_channels)}


def forward_train(model, x):
    """Batched forward keeping per-layer caches; returns (logits N x K, caches, activations)."""
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(model.config.input_shape):
        raise ShapeError(f"input {x.shape} does not match N x {model.config.input_shape}")
    caches, acts = [], []
    h = x
    for layer in model.config.layers:
        cache = {"x": h}
        if layer.kind == "conv":
            w, b = model.conv_params(layer.name, layer.spec)
            pre, cols = L.conv2d_forward_cols(h, layer.spec, w, b)
            cache.update(cols=cols, pre=pre)
            h = L.relu(pre) if layer.relu else pre
        elif layer.kind == "pool":
            h, cache["argmax"] = L.maxpool_forward(h, layer.spec)
        elif layer.kind == "fire":
            h = L.fire_forward(h, layer.spec, _block_params(model, layer, h.shape[1]), cache)
        elif layer.kind == "ima":
            h = ima_forward(h, layer.spec, _block_params(model, layer, h.shape[1]), cache)
        elif layer.kind == "gap":
            h = L.global_average_pool(h)
        elif layer.kind == "flatten":
            h = h.reshape(h.shape[0], -1, 1, 1)
        caches.append(cache)
        acts.append(h)
    logits = h.reshape(h.shape[0], -1)
    return logits, caches, acts


def backward(model, caches, grad_logits):
    """Accumulate parameter gradients into ``model.grads``; returns grad w.r.t. the input."""
    g = grad_logits.reshape(grad_logits.shape[0], -1, 1, 1)
    return backward_from(model, caches, len(model.config.layers) - 1, g)


def backward_from(model, caches, index, grad):
    """Back-propagate ``grad`` (shaped like layer ``index``'s activation) to the input."""
    g = grad
    layers = model.config.layers[:index + 1]
    for layer, cache in zip(reversed(layers), reversed(caches[:index + 1])):
        x = cache["x"]
        if layer.kind == "conv":
            if layer.relu:
                g = L.relu_backward(cache["pre"], g)
            w, _ = model.conv_params(layer.name, layer.spec)
            g, gw, gb = L.conv2d_backward(x, layer.spec, w, g, cache["cols"])
            model._add_grad(layer.name, gw, gb)
        elif layer.kind == "pool":
            g = L.maxpool_backward(g, cache["argmax"], x.shape)
        elif layer.kind in ("fire", "ima"):
            params = _block_params(model, layer, x.shape[1])
            back = L.fire_backward if layer.kind == "fire" else ima_backward
            g, grads = back(cache, layer.spec, params, g)
            for sub, (gw, gb) in grads.items():
                model._add_grad(f"{layer.name}.{sub}", gw, gb)
        elif layer.kind == "gap":
            g = L.global_average_pool_backward(g, x.shape)
        elif layer.kind == "flatten":
            g = g.reshape(x.shape)
    return g


def forward(model, x, capture=()):
    """Logits for one C x H x W input (or a batch) plus requested activations by layer name."""
    single = x.ndim == 3
    xb = x[None] if single else x
    logits, _, acts = forward_train(model, xb)
    names = [layer.name for layer in model.config.layers]
    unknown = set(capture) - set(names)
    if unknown:
        raise KeyError(f"unknown layer names {sorted(unknown)}")
    captured = {}
    for name in capture:
        a = acts[names.index(name)]
        captured[name] = a[0] if single else a
    return (logits[0] if single else logits), captured


def predict(model, x):
    """(level, probabilities) for one input; ties resolve to the lowest class index."""
    logits, _ = forward(model, x)
    probs = L.softmax(logits.astype(np.float64), "channel")
    k = int(np.argmax(probs))
    level = DensityLevel(k) if model.config.class_count == 3 else k
    return level, probs


# -- weight files ----------------------------------------------------------

def save_weights(model, sink):
    """Write little-endian ``MCNW`` v1; ``sink`` is a path or a binary file object."""
    buf = io.BytesIO()
    buf.write(_HEADER.pack(WEIGHTS_MAGIC, WEIGHTS_VERSION, len(model.params), 0))
    for name, arr in model.params.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    data = buf.getvalue()
    if isinstance(sink, (str, Path)):
        Path(sink).write_bytes(data)
    else:
        sink.write(data)
    return len(data)


def weights_file_size(config):
    total = _HEADER.size
    for name, dims, _ in param_layout(config):
        total += 2 + len(name.encode("utf-8")) + 1 + 4 * len(dims) + 4 * int(np.prod(dims))
    return total


def load_weights(config, source):
    if isinstance(source, (str, Path)):
        data = Path(source).read_bytes()
    elif isinstance(source, (bytes, bytearray)):
        data = bytes(source)
    else:
        data = source.read()
    view = memoryview(data)
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(view):
            raise WeightsFormatError(f"truncated stream while reading {what}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    magic, version, count, _ = _HEADER.unpack(take(_HEADER.size, "header"))
    if magic != WEIGHTS_MAGIC:
        raise WeightsFormatError(f"bad magic {bytes(magic)!r}, expected {WEIGHTS_MAGIC!r}")
    if version != WEIGHTS_VERSION:
        raise WeightsFormatError(f"unsupported weights version {version}")
    expected = {name: tuple(dims) for name, dims, _ in param_layout(config)}
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = bytes(take(nlen, "tensor name")).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, f"rank of {name}"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"dims of {name}"))
        if name not in expected:
            raise WeightsFormatError(f"unknown tensor {name!r}")
        if tuple(dims) != expected[name]:
            raise WeightsFormatError(f"tensor {name!r} has dims {dims}, config expects {expected[name]}")
        numel = int(np.prod(dims))
        arr = np.frombuffer(take(4 * numel, f"data of {name}"), dtype="<f4").reshape(dims)
        params[name] = arr.astype(DTYPE)
    missing = expected.keys() - params.keys()
    if missing:
        raise WeightsFormatError(f"missing tensors: {sorted(missing)}")
    if pos != len(view):
        raise WeightsFormatError(f"{len(view) - pos} trailing bytes after last tensor")
    ordered = {name: params[name] for name in expected}
    return Model.from_params(config, ordered)
