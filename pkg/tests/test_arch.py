import pytest

from mcnet.arch import ArchError, builtin_configs, load_arch, parse_arch, render_arch
from mcnet.tensor import make_rng

from oracles import random_arch_text

TINY = """\
input 3x8x8
conv out=4 k=3 s=1 p=1   # trunk
pool kind=max k=2
fire s=2 e1=3 e3=3
ima dil=1,2 proj=5
conv out=3 k=1
gap
classes 3
"""


def test_parse_names_and_shapes():
    cfg = parse_arch(TINY)
    assert [l.name for l in cfg.layers] == ["L0_conv", "L1_pool", "L2_fire", "L3_ima", "L4_conv", "L5_gap"]
    assert cfg.shapes() == [(4, 8, 8), (4, 4, 4), (6, 4, 4), (5, 4, 4), (3, 4, 4), (3, 1, 1)]
    assert cfg.layers[1].spec.stride == 2  # pool stride defaults to the window
    assert cfg.weight_layer_count == 4
    assert cfg.layers[0].relu and not cfg.layers[4].relu


def test_defaults():
    cfg = parse_arch("input 2x6x6\nima\nconv out=2 k=1\ngap\nclasses 2\n")
    ima = cfg.layers[0].spec
    assert ima.dilations == (1, 2, 3) and ima.project_out == 2
    conv = cfg.layers[1].spec
    assert (conv.stride, conv.padding, conv.dilation, conv.has_bias) == (1, 0, 1, True)


def test_missing_head_rejected():
    with pytest.raises(ArchError, match="head"):
        parse_arch("input 3x8x8\nconv out=4 k=3 s=1 p=1\ngap\nclasses 3")


def test_kernel_restriction():
    with pytest.raises(ArchError, match="k must be 1 or 3") as info:
        parse_arch("input 3x8x8\nconv out=16 k=5\nconv out=3 k=1\ngap\nclasses 3")
    assert info.value.line == 2


@pytest.mark.parametrize("text, line", [
    ("input 3x8x8\nwarp out=2\n", 2),
    ("input 3x8x8\nconv out=2 k=3 q=1\n", 2),
    ("input 3x8x8\nconv out=2 k3\n", 2),
    ("input 3x8x8\ninput 3x8x8\n", 2),
    ("input 3x8x8\nclasses 3\nclasses 3\n", 3),
    ("input 3x8x8\nconv out=x k=3\nconv out=3 k=1\ngap\nclasses 3\n", 2),
    ("input 3x4x4\n\n# comment\nconv out=2 k=3 d=3\nconv out=3 k=1\ngap\nclasses 3\n", 4),
    ("input 3x4x4\npool k=5\nconv out=3 k=1\ngap\nclasses 3\n", 2),
    ("input 3x8x8\nima dil=1,1\nconv out=3 k=1\ngap\nclasses 3\n", 2),
])
def test_errors_carry_line_numbers(text, line):
    with pytest.raises(ArchError) as info:
        parse_arch(text)
    assert info.value.line == line
    assert str(info.value).startswith(f"line {line}:")


def test_missing_input_or_classes():
    with pytest.raises(ArchError, match="input"):
        parse_arch("conv out=3 k=1\ngap\nclasses 3\n")
    with pytest.raises(ArchError, match="classes"):
        parse_arch("input 3x8x8\nconv out=3 k=1\ngap\n")


def test_gap_only_in_head():
    with pytest.raises(ArchError, match="only allowed"):
        parse_arch("input 3x8x8\ngap\nconv out=3 k=1\ngap\nclasses 3\n")


def test_builtin_configs_parse():
    names = builtin_configs()
    assert {"default", "default_ima", "small", "small_ima", "tiny"} <= set(names)
    for name in names:
        cfg = load_arch(name)
        assert parse_arch(render_arch(cfg)) == cfg


def test_default_has_fifteen_weight_layers():
    cfg = load_arch("default")
    assert cfg.input_shape == (3, 227, 227)
    assert cfg.weight_layer_count == 15
    assert cfg.shapes()[-1] == (3, 1, 1)


def test_load_from_path(tmp_path):
    p = tmp_path / "net.arch"
    p.write_text(TINY, encoding="utf-8")
    assert load_arch(p) == parse_arch(TINY)


def test_render_round_trip_random_configs():
    rng = make_rng(7)
    for _ in range(50):
        cfg = parse_arch(random_arch_text(rng))
        text = render_arch(cfg)
        again = parse_arch(text)
        assert again == cfg
        assert render_arch(again) == text


def test_with_input_shape():
    cfg = load_arch("small").with_input_shape((3, 96, 96))
    assert cfg.input_shape == (3, 96, 96)
    assert cfg.shapes()[-1] == (3, 1, 1)
