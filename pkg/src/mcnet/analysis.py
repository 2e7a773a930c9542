"""Weight-free static analysis: receptive field, parameter and MAC counts.

The receptive field follows r_n = r_{n-1} + (f_n - 1) * prod(s_1 .. s_{n-1})
with r_0 = 1. Dilated convs contribute their effective size
k + (k - 1)(d - 1); pooling layers take part with their window and stride.
A fire module acts as a stride-1 3x3 stage. For an IMA block the row reports
its widest dilated branch footprint; its softmax gate itself pools over the
whole map, which this recurrence does not model. Global average pooling
ends the recurrence (row f_eff = 1).

MACs count convolution multiplies only, including taps that fall in zero
padding; bias, pooling and activations are free.
"""

import csv
import io
from dataclasses import dataclass

from mcnet.arch import ArchConfig

CSV_HEADER = ["name", "kind", "out_shape", "f_eff", "stride", "rf", "params", "macs"]


@dataclass(frozen=True)
class LayerRow:
    name: str
    kind: str
    out_shape: tuple
    f_eff: int
    stride: int
    rf: int
    params: int
    macs: int


@dataclass(frozen=True)
class AnalysisReport:
    rows: tuple
    input_shape: tuple
    total_params: int
    total_macs: int
    rf_final: int
    covers_input: bool
    weight_layers: int


def _conv_params(out_c, in_c, k, bias=True):
    return out_c * in_c * k * k + (out_c if bias else 0)


def _footprint(layer):
    """(effective filter size, stride) of one layer for the recurrence."""
    kind, s = layer.kind, layer.spec
    if kind == "conv":
        return s.kernel + (s.kernel - 1) * (s.dilation - 1), s.stride
    if kind == "pool":
        return s.window, s.stride
    if kind == "fire":
        return 3, 1
    if kind == "ima":
        return 3 + 2 * (max(s.dilations) - 1), 1
    return 1, 1


def receptive_field(config):
    rf, jump, out = 1, 1, []
    for layer in config.layers:
        f, s = _footprint(layer)
        rf += (f - 1) * jump
        jump *= s
        out.append(rf)
    return out


def _layer_params(layer, in_c):
    s = layer.spec
    if layer.kind == "conv":
        return _conv_params(s.out_channels, in_c, s.kernel, s.has_bias)
    if layer.kind == "fire":
        return (_conv_params(s.squeeze, in_c, 1) + _conv_params(s.expand1, s.squeeze, 1)
                + _conv_params(s.expand3, s.squeeze, 3))
    if layer.kind == "ima":
        c, nb = s.channels, len(s.dilations)
        return nb * (_conv_params(c, c, 3) + _conv_params(c, c, 1)) + _conv_params(s.project_out, nb * c, 1)
    return 0


def _layer_macs(layer, in_shape, out_shape):
    s = layer.spec
    c_in = in_shape[0]
    _, ho, wo = out_shape
    if layer.kind == "conv":
        return ho * wo * s.out_channels * c_in * s.kernel * s.kernel
    if layer.kind == "fire":
        return ho * wo * (s.squeeze * c_in + s.expand1 * s.squeeze + s.expand3 * s.squeeze * 9)
    if layer.kind == "ima":
        c, nb = s.channels, len(s.dilations)
        return ho * wo * (nb * (c * c * 9 + c * c) + nb * c * s.project_out)
    return 0


def _in_shapes(config):
    return [config.input_shape] + config.shapes()[:-1]


def count_params(config):
    """(per-layer list, total)."""
    per = [_layer_params(layer, shp[0]) for layer, shp in zip(config.layers, _in_shapes(config))]
    return per, sum(per)


def count_macs(config, input_shape=None):
    """(per-layer list, total) at ``input_shape`` (defaults to the config's)."""
    if input_shape is not None and tuple(input_shape) != tuple(config.input_shape):
        config = config.with_input_shape(input_shape)
    per = [_layer_macs(layer, i, o)
           for layer, i, o in zip(config.layers, _in_shapes(config), config.shapes())]
    return per, sum(per)


def analyze(config: ArchConfig, input_shape=None) -> AnalysisReport:
    if input_shape is not None and tuple(input_shape) != tuple(config.input_shape):
        config = config.with_input_shape(input_shape)
    rfs = receptive_field(config)
    params, total_params = count_params(config)
    macs, total_macs = count_macs(config)
    rows = []
    for layer, shape, rf, p, m in zip(config.layers, config.shapes(), rfs, params, macs):
        f, s = _footprint(layer)
        rows.append(LayerRow(layer.name, layer.kind, tuple(shape), f, s, rf, p, m))
    rf_final = rfs[-1] if rfs else 1
    _, h, w = config.input_shape
    return AnalysisReport(
        rows=tuple(rows),
        input_shape=tuple(config.input_shape),
        total_params=total_params,
        total_macs=total_macs,
        rf_final=rf_final,
        covers_input=rf_final >= max(h, w),
        weight_layers=config.weight_layer_count,
    )


def _shape_str(shape):
    return "x".join(str(d) for d in shape)


def render_csv(report):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(CSV_HEADER)
    for r in report.rows:
        writer.writerow([r.name, r.kind, _shape_str(r.out_shape), r.f_eff, r.stride, r.rf, r.params, r.macs])
    writer.writerow(["TOTAL", "", "", "", "", report.rf_final, report.total_params, report.total_macs])
    return buf.getvalue()


def parse_csv_totals(text):
    """(rf_final, params, macs) from the TOTAL row of a CSV report."""
    rows = list(csv.DictReader(io.StringIO(text)))
    total = [r for r in rows if r["name"] == "TOTAL"]
    if len(total) != 1:
        raise ValueError("CSV report must contain exactly one TOTAL row")
    t = total[0]
    return int(t["rf"]), int(t["params"]), int(t["macs"])


def render_text(report):
    table = [["name", "kind", "out_shape", "f_eff", "stride", "rf", "params", "macs"]]
    for r in report.rows:
        table.append([r.name, r.kind, _shape_str(r.out_shape), str(r.f_eff), str(r.stride),
                      str(r.rf), f"{r.params:,}", f"{r.macs:,}"])
    table.append(["TOTAL", "", "", "", "", str(report.rf_final),
                  f"{report.total_params:,}", f"{report.total_macs:,}"])
    widths = [max(len(row[i]) for row in table) for i in range(len(table[0]))]
    lines = []
    for n, row in enumerate(table):
        cells = [c.ljust(w) if i < 3 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths))]
        lines.append("  ".join(cells).rstrip())
        if n == 0 or n == len(table) - 2:
            lines.append("-" * len(lines[-1]))
    lines.append("")
    lines.append(f"input {_shape_str(report.input_shape)}  weight_layers={report.weight_layers}")
    lines.append(f"params={report.total_params} ({report.total_params / 1e6:.3f} M)  "
                 f"macs={report.total_macs} ({report.total_macs / 1e9:.3f} G)")
    lines.append(f"rf_final={report.rf_final}  covers_input={'true' if report.covers_input else 'false'}")
    return "\n".join(lines) + "\n"


def analysis_report(config, input_shape=None, fmt="text"):
    report = analyze(config, input_shape)
    if fmt == "csv":
        return render_csv(report)
    if fmt == "text":
        return render_text(report)
    raise ValueError(f"format must be 'text' or 'csv', got {fmt!r}")
