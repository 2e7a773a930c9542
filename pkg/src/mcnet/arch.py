"""Architecture DSL: one directive per line.

    input 3x227x227
    conv out=16 k=3 s=2 p=1 d=1      # s, p, d, bias optional (1, 0, 1, 1)
    pool kind=max k=3 s=2            # s defaults to k
    fire s=16 e1=64 e3=64
    ima dil=1,2,3 proj=128           # proj defaults to the incoming width
    gap
    classes 3

Every conv except the classifier head is followed by ReLU. The head is the
final ``conv out=<classes> k=1`` and must be followed by ``gap`` (optionally
``flatten``).
"""

from dataclasses import dataclass, field, replace
from pathlib import Path

from mcnet.ima import ImaSpec
from mcnet.layers import ConvSpec, FireSpec, PoolSpec

ALLOWED_CONV_KERNELS = (1, 3)
KINDS = ("conv", "pool", "fire", "ima", "gap", "flatten")
CONFIG_DIR = Path(__file__).with_name("configs")


class ArchError(ValueError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    spec: object
    name: str
    relu: bool = False
    line: int = field(default=0, compare=False)

    @property
    def weight_bearing(self):
        return self.kind in ("conv", "fire", "ima")


@dataclass(frozen=True)
class ArchConfig:
    input_shape: tuple
    layers: tuple
    class_count: int

    def shapes(self):
        """Output C x H x W of every layer, in order."""
        return propagate_shapes(self.input_shape, self.layers)

    @property
    def weight_layer_count(self):
        return sum(1 for layer in self.layers if layer.weight_bearing)

    def layer(self, name):
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(f"no layer named {name!r}; layers are {[l.name for l in self.layers]}")

    def with_input_shape(self, shape):
        """Same layer stack re-validated for another input shape."""
        return build_config(tuple(shape), [(l.kind, _directive_args(l), l.line) for l in self.layers],
                            self.class_count)


def _layer_out_shape(layer, shape):
    c, h, w = shape
    kind, spec = layer.kind, layer.spec
    if kind == "conv":
        if spec.in_channels != c:
            raise ArchError(f"conv expects {spec.in_channels} channels, got {c}", layer.line)
        out = (spec.out_channels, spec.out_dim(h), spec.out_dim(w))
        if out[1] < 1 or out[2] < 1:
            raise ArchError(f"conv kernel (effective {spec.effective_kernel}) exceeds padded input {h}x{w}",
                            layer.line)
        return out
    if kind == "pool":
        if spec.window > h or spec.window > w:
            raise ArchError(f"pool window {spec.window} exceeds input {h}x{w}", layer.line)
        return (c, spec.out_dim(h), spec.out_dim(w))
    if kind == "fire":
        return (spec.out_channels, h, w)
    if kind == "ima":
        if spec.channels != c:
            raise ArchError(f"ima expects {spec.channels} channels, got {c}", layer.line)
        return (spec.project_out, h, w)
    if kind == "gap":
        return (c, 1, 1)
    if kind == "flatten":
        return (c * h * w, 1, 1)
    raise ArchError(f"unknown layer kind {kind!r}", layer.line)


def propagate_shapes(input_shape, layers):
    shapes, shape = [], tuple(input_shape)
    for layer in layers:
        shape = _layer_out_shape(layer, shape)
        shapes.append(shape)
    return shapes


# -- parsing ---------------------------------------------------------------

_KEYS = {
    "conv": {"out", "k", "s", "p", "d", "bias"},
    "pool": {"kind", "k", "s"},
    "fire": {"s", "e1", "e3"},
    "ima": {"dil", "proj"},
    "gap": set(),
    "flatten": set(),
}


def _parse_int(value, key, line):
    try:
        v = int(value)
    except ValueError:
        raise ArchError(f"{key}={value!r} is not an integer", line) from None
    return v


def _parse_kv(kind, tokens, line):
    args = {}
    for tok in tokens:
        if "=" not in tok:
            raise ArchError(f"malformed key {tok!r} (expected key=value)", line)
        key, value = tok.split("=", 1)
        if key not in _KEYS[kind]:
            raise ArchError(f"unknown key {key!r} for {kind}", line)
        if key in args:
            raise ArchError(f"duplicate key {key!r}", line)
        if not value:
            raise ArchError(f"empty value for {key!r}", line)
        args[key] = value
    return args


def _parse_shape(text, line):
    parts = text.lower().split("x")
    if len(parts) != 3:
        raise ArchError(f"input shape must be CxHxW, got {text!r}", line)
    dims = tuple(_parse_int(p, "input", line) for p in parts)
    if min(dims) < 1:
        raise ArchError(f"input dims must be >= 1, got {text!r}", line)
    return dims


def parse_arch(text):
    input_shape = class_count = None
    directives = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        body = raw.split("#", 1)[0].strip()
        if not body:
            continue
        head, *tokens = body.split()
        if head == "input":
            if input_shape is not None:
                raise ArchError("duplicate 'input' directive", lineno)
            if len(tokens) != 1:
                raise ArchError("'input' takes one CxHxW argument", lineno)
            input_shape = _parse_shape(tokens[0], lineno)
        elif head == "classes":
            if class_count is not None:
                raise ArchError("duplicate 'classes' directive", lineno)
            if len(tokens) != 1:
                raise ArchError("'classes' takes one integer", lineno)
            class_count = _parse_int(tokens[0], "classes", lineno)
            if class_count < 1:
                raise ArchError("class count must be >= 1", lineno)
        elif head in _KEYS:
            directives.append((head, _parse_kv(head, tokens, lineno), lineno))
        else:
            raise ArchError(f"unknown directive {head!r}", lineno)
    if input_shape is None:
        raise ArchError("missing 'input' directive")
    if class_count is None:
        raise ArchError("missing 'classes' directive")
    return build_config(input_shape, directives, class_count)


def load_arch(path):
    """Parse a config file, or a bundled config by bare name (e.g. ``default``)."""
    p = Path(path)
    if not p.exists() and not p.suffix and (CONFIG_DIR / f"{p.name}.arch").exists():
        p = CONFIG_DIR / f"{p.name}.arch"
    return parse_arch(p.read_text(encoding="utf-8"))


def builtin_configs():
    return sorted(p.stem for p in CONFIG_DIR.glob("*.arch"))


def _make_spec(kind, args, in_channels, line):
    geti = lambda key, default=None: (  # noqa: E731
        _parse_int(args[key], key, line) if key in args else default)
    try:
        if kind == "conv":
            if "out" not in args or "k" not in args:
                raise ArchError("conv needs out= and k=", line)
            k = geti("k")
            if k not in ALLOWED_CONV_KERNELS:
                raise ArchError(f"conv filter size k={k} not allowed; k must be 1 or 3", line)
            return ConvSpec(geti("out"), in_channels, k, geti("s", 1), geti("p", 0), geti("d", 1),
                            bool(geti("bias", 1)))
        if kind == "pool":
            if args.get("kind", "max") != "max":
                raise ArchError(f"pool kind {args['kind']!r} not supported (use max, or gap)", line)
            if "k" not in args:
                raise ArchError("pool needs k=", line)
            k = geti("k")
            return PoolSpec("max", k, geti("s", k))
        if kind == "fire":
            if not {"s", "e1", "e3"} <= args.keys():
                raise ArchError("fire needs s=, e1= and e3=", line)
            return FireSpec(geti("s"), geti("e1"), geti("e3"))
        if kind == "ima":
            dil = (1, 2, 3)
            if "dil" in args:
                dil = tuple(_parse_int(v, "dil", line) for v in args["dil"].split(","))
            return ImaSpec(in_channels, dil, geti("proj", in_channels))
        if kind == "gap":
            return PoolSpec("global_average", 1, 1)
        return None
    except ArchError:
        raise
    except ValueError as exc:
        raise ArchError(str(exc), line) from None


def build_config(input_shape, directives, class_count):
    """Turn (kind, args, line) directives into a validated ArchConfig."""
    layers, shape = [], tuple(input_shape)
    for index, (kind, args, line) in enumerate(directives):
        spec = _make_spec(kind, args, shape[0], line)
        layer = LayerSpec(kind, spec, f"L{index}_{kind}", kind == "conv", line)
        shape = _layer_out_shape(layer, shape)
        layers.append(layer)
    _check_head(layers, class_count)
    # the classifier head conv feeds the softmax directly: no ReLU
    head_at = _head_index(layers)
    layers[head_at] = replace(layers[head_at], relu=False)
    return ArchConfig(tuple(input_shape), tuple(layers), class_count)


def _head_index(layers):
    i = len(layers) - 1
    if i >= 0 and layers[i].kind == "flatten":
        i -= 1
    return i - 1


def _check_head(layers, class_count):
    i = len(layers) - 1
    if i >= 0 and layers[i].kind == "flatten":
        i -= 1
    if i < 0 or layers[i].kind != "gap":
        raise ArchError("classifier head missing: config must end with conv(out=classes, k=1) then gap")
    head = layers[i - 1] if i >= 1 else None
    if head is None or head.kind != "conv" or head.spec.kernel != 1 or head.spec.out_channels != class_count:
        raise ArchError(
            f"classifier head missing: the layer before gap must be conv out={class_count} k=1",
            layers[i].line,
        )
    for layer in layers[:i]:
        if layer.kind in ("gap", "flatten"):
            raise ArchError(f"{layer.kind} is only allowed in the classifier head", layer.line)


# -- rendering -------------------------------------------------------------

def _directive_args(layer):
    s = layer.spec
    if layer.kind == "conv":
        return {"out": s.out_channels, "k": s.kernel, "s": s.stride, "p": s.padding,
                "d": s.dilation, "bias": int(s.has_bias)}
    if layer.kind == "pool":
        return {"kind": "max", "k": s.window, "s": s.stride}
    if layer.kind == "fire":
        return {"s": s.squeeze, "e1": s.expand1, "e3": s.expand3}
    if layer.kind == "ima":
        return {"dil": ",".join(str(d) for d in s.dilations), "proj": s.project_out}
    return {}


def render_arch(config):
    c, h, w = config.input_shape
    lines = [f"input {c}x{h}x{w}"]
    for layer in config.layers:
        args = _directive_args(layer)
        lines.append(" ".join([layer.kind] + [f"{k}={v}" for k, v in args.items()]))
    lines.append(f"classes {config.class_count}")
    return "\n".join(lines) + "\n"
