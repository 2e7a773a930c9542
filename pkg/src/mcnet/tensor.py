"""Dense channels-first float32 arrays and the few structural ops built on them.

A "tensor" here is a C-contiguous ``numpy.ndarray`` of rank 1..4, laid out as
C x H x W or N x C x H x W. Layer code accepts float64 as well so gradient
checks can run in double precision; everything else stays float32.
"""

import numpy as np

DTYPE = np.float32
MAX_RANK = 4


class ShapeError(ValueError):
    """Raised when tensor dimensions are incompatible with an operation."""


def _check_dims(dims):
    dims = tuple(int(d) for d in dims)
    if not dims:
        raise ShapeError("dims must be non-empty")
    if len(dims) > MAX_RANK:
        raise ShapeError(f"rank {len(dims)} exceeds {MAX_RANK}")
    if any(d < 1 for d in dims):
        raise ShapeError(f"all dims must be >= 1, got {dims}")
    return dims


def make_rng(seed):
    """Seeded generator; PCG64 draws are identical across platforms."""
    return np.random.Generator(np.random.PCG64(np.uint64(seed)))


def tensor_zeros(dims):
    return np.zeros(_check_dims(dims), dtype=DTYPE)


def tensor_random_init(dims, fan_in, rng):
    """Uniform draw from [-b, b] with b = sqrt(6 / fan_in)."""
    dims = _check_dims(dims)
    if fan_in < 1:
        raise ValueError(f"fan_in must be >= 1, got {fan_in}")
    bound = np.sqrt(6.0 / fan_in)
    # draw in float64 then narrow: keeps the stream independent of dtype
    return rng.uniform(-bound, bound, size=dims).astype(DTYPE)


def elementwise_add(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch in add: {a.shape} vs {b.shape}")
    return a + b


def _channel_axis(t):
    if t.ndim == 3:
        return 0
    if t.ndim == 4:
        return 1
    raise ShapeError(f"expected rank 3 or 4, got rank {t.ndim}")


def concat_channels(parts):
    """Stack tensors along the channel axis, preserving part order."""
    parts = list(parts)
    if len(parts) < 2:
        raise ShapeError("concat_channels needs at least two parts")
    axis = _channel_axis(parts[0])
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != parts[0].ndim:
            raise ShapeError("all parts must share rank")
        if p.shape[axis + 1:] != ref[axis + 1:]:
            raise ShapeError(f"spatial dims differ: {p.shape} vs {ref}")
        if axis == 1 and p.shape[0] != ref[0]:
            raise ShapeError(f"batch dims differ: {p.shape} vs {ref}")
    return np.concatenate(parts, axis=axis)


def channel_slice(t, start, stop):
    axis = _channel_axis(t)
    index = [slice(None)] * t.ndim
    index[axis] = slice(start, stop)
    return np.ascontiguousarray(t[tuple(index)])


def split_channels(t, sizes):
    """Inverse of :func:`concat_channels` for known block sizes."""
    out, start = [], 0
    for size in sizes:
        out.append(channel_slice(t, start, start + size))
        start += size
    if start != t.shape[_channel_axis(t)]:
        raise ShapeError(f"block sizes {sizes} do not cover {t.shape}")
    return out


def as_batch(x):
    """Promote C x H x W to 1 x C x H x W; returns (array, was_single)."""
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected rank 3 or 4 feature map, got shape {x.shape}")
