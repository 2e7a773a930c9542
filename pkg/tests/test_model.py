import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcnet import layers as L
from mcnet.analysis import count_params
from mcnet.arch import load_arch, parse_arch
from mcnet.ima import ima_forward
from mcnet.model import (
    DensityLevel,
    WeightsFormatError,
    build_model,
    forward,
    load_weights,
    param_layout,
    predict,
    save_weights,
    weights_file_size,
)
from mcnet.tensor import ShapeError, make_rng

LINEAR = parse_arch("input 1x1x1\nconv out=3 k=1\ngap\nclasses 3\n")


def linear_model(logits):
    m = build_model(LINEAR, make_rng(0))
    m.params["L0_conv.weight"][...] = np.asarray(logits, np.float32).reshape(3, 1, 1, 1)
    return m


@pytest.mark.parametrize("name", ["default", "default_ima", "small", "small_ima", "tiny"])
def test_param_count_matches_analyzer(name):
    cfg = load_arch(name)
    assert build_model(cfg, make_rng(0)).param_count == count_params(cfg)[1]


def test_default_budget():
    assert 100_000 <= count_params(load_arch("default"))[1] <= 170_000


def test_same_seed_same_params():
    cfg = load_arch("tiny")
    a, b = build_model(cfg, make_rng(5)), build_model(cfg, make_rng(5))
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    c = build_model(cfg, make_rng(6))
    assert any(not np.array_equal(a.params[k], c.params[k]) for k in a.params)


def test_logits_length_for_default():
    cfg = load_arch("default")
    logits, _ = forward(build_model(cfg, make_rng(0)), np.zeros(cfg.input_shape, np.float32))
    assert logits.shape == (3,)


def test_zero_input_bias_free_gives_zero_logits():
    cfg = parse_arch("input 3x12x12\nconv out=4 k=3 p=1 bias=0\npool k=2\nconv out=3 k=1 bias=0\ngap\nclasses 3\n")
    logits, _ = forward(build_model(cfg, make_rng(1)), np.zeros((3, 12, 12), np.float32))
    assert not logits.any()


def test_input_shape_mismatch():
    m = build_model(load_arch("tiny"), make_rng(0))
    with pytest.raises(ShapeError):
        forward(m, np.zeros((3, 11, 11), np.float32))


def test_layerwise_composition_is_exact(rng):
    cfg = load_arch("tiny")
    m = build_model(cfg, rng)
    for name, p in m.params.items():
        if name.endswith(".bias"):
            p[...] = rng.uniform(-0.1, 0.1, size=p.shape)
    x = rng.uniform(0, 1, size=cfg.input_shape).astype(np.float32)
    names = [l.name for l in cfg.layers]
    logits, acts = forward(m, x, capture=names)
    h = x
    for layer in cfg.layers:
        p = lambda k: (m.params[f"{layer.name}.{k}.weight"], m.params[f"{layer.name}.{k}.bias"])  # noqa: E731
        if layer.kind == "conv":
            h = L.conv2d_forward(h, layer.spec, m.params[f"{layer.name}.weight"], m.params[f"{layer.name}.bias"])
            h = L.relu(h) if layer.relu else h
        elif layer.kind == "pool":
            h = L.maxpool_forward(h, layer.spec)[0]
        elif layer.kind == "fire":
            h = L.fire_forward(h, layer.spec, {k: p(k) for k in ("squeeze", "expand1", "expand3")})
        elif layer.kind == "ima":
            h = ima_forward(h, layer.spec, {k: p(k) for k in layer.spec.conv_specs()})
        elif layer.kind == "gap":
            h = L.global_average_pool(h)
        assert np.array_equal(acts[layer.name], h), layer.name
    assert np.array_equal(logits, h.reshape(-1))


def test_capture_unknown_layer():
    m = build_model(load_arch("tiny"), make_rng(0))
    with pytest.raises(KeyError):
        forward(m, np.zeros(m.config.input_shape, np.float32), capture=["L99_conv"])


def test_ima_toggle_keeps_other_dims():
    plain = [dims for name, dims, _ in param_layout(load_arch("default"))]
    with_ima = [dims for name, dims, _ in param_layout(load_arch("default_ima")) if "_ima." not in name]
    assert plain == with_ima


# -- predict ---------------------------------------------------------------

def test_predict_closed_form():
    level, probs = predict(linear_model([2, 0, 0]), np.ones((1, 1, 1), np.float32))
    e = np.exp(2.0)
    assert level is DensityLevel.LOW
    assert np.allclose(probs, [e / (e + 2), 1 / (e + 2), 1 / (e + 2)])
    assert np.allclose(probs, [0.788, 0.106, 0.106], atol=2e-3)


def test_predict_ties_go_low():
    level, probs = predict(linear_model([0.5, 0.5, 0.5]), np.ones((1, 1, 1), np.float32))
    assert level is DensityLevel.LOW and np.allclose(probs, 1 / 3)
    level, _ = predict(linear_model([0, 1, 1]), np.ones((1, 1, 1), np.float32))
    assert level is DensityLevel.MEDIUM


@settings(max_examples=50)
@given(st.lists(st.floats(-30, 30, width=32), min_size=3, max_size=3))
def test_predict_distribution(logits):
    m = linear_model(logits)
    x = np.ones((1, 1, 1), np.float32)
    level, probs = predict(m, x)
    assert np.all(probs >= 0) and abs(probs.sum() - 1) < 1e-6
    assert int(level) == int(np.argmax(probs)) == int(np.argmax(forward(m, x)[0]))


def test_density_labels():
    assert [lv.label for lv in DensityLevel] == ["low", "medium", "high"]


# -- weight files ----------------------------------------------------------

def _saved(model):
    buf = io.BytesIO()
    save_weights(model, buf)
    return buf.getvalue()


@pytest.mark.parametrize("name", ["tiny", "small_ima"])
def test_save_load_save_identical(name):
    cfg = load_arch(name)
    blob = _saved(build_model(cfg, make_rng(3)))
    again = load_weights(cfg, blob)
    assert _saved(again) == blob
    assert len(blob) == weights_file_size(cfg)


def test_file_size_arithmetic():
    blob = _saved(linear_model([1, 2, 3]))
    # header + weight record (2 + 14 name + 1 rank + 16 dims + 12 data) + bias record (2 + 12 + 1 + 4 + 12)
    assert len(blob) == 16 + (2 + 14 + 1 + 16 + 12) + (2 + 12 + 1 + 4 + 12) == 92
    assert blob[:4] == b"MCNW" and struct.unpack("<III", blob[4:16]) == (1, 2, 0)


def test_path_round_trip(tmp_path):
    m = build_model(load_arch("tiny"), make_rng(0))
    save_weights(m, tmp_path / "w.bin")
    back = load_weights(m.config, tmp_path / "w.bin")
    assert all(np.array_equal(m.params[k], back.params[k]) for k in m.params)


def test_corrupt_dim_names_tensor():
    blob = bytearray(_saved(linear_model([1, 2, 3])))
    # first record: u16 len, "L0_conv.weight", u8 rank, then the first dim
    dim_at = 16 + 2 + 14 + 1
    blob[dim_at:dim_at + 4] = struct.pack("<I", 7)
    with pytest.raises(WeightsFormatError, match="L0_conv.weight"):
        load_weights(LINEAR, bytes(blob))


@pytest.mark.parametrize("mutate, match", [
    (lambda b: b"XXXX" + b[4:], "magic"),
    (lambda b: b[:4] + struct.pack("<I", 2) + b[8:], "version"),
    (lambda b: b[:-3], "truncated"),
    (lambda b: b + b"\0", "trailing"),
    (lambda b: b[:8] + struct.pack("<I", 1) + b[12:16] + b[16:16 + 2 + 14 + 1 + 16 + 12], "missing"),
    (lambda b: b[:18] + b"Q" + b[19:], "unknown tensor"),
])
def test_corruption_errors(mutate, match):
    blob = _saved(linear_model([1, 2, 3]))
    with pytest.raises(WeightsFormatError, match=match):
        load_weights(LINEAR, mutate(blob))


def test_weights_from_other_config_rejected():
    blob = _saved(build_model(load_arch("tiny"), make_rng(0)))
    with pytest.raises(WeightsFormatError):
        load_weights(load_arch("small"), blob)
