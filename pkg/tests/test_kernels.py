"""Compiled and numpy kernel backends must agree bit for bit."""
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from mcnet import kernels
from mcnet.tensor import make_rng

BACKENDS = kernels.available_backends()
CASES = [(3, 1, 1, 1), (3, 2, 1, 2), (1, 1, 0, 1), (3, 2, 3, 3), (3, 1, 0, 1), (1, 2, 0, 1)]


def test_numpy_backend_always_available():
    assert "python" in BACKENDS
    with pytest.raises(ValueError):
        kernels.load_backend("fortran")


@pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled extension not built")
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("k,s,p,d", CASES)
def test_conv_kernels_match(dtype, k, s, p, d):
    c, py = kernels.load_backend("cython"), kernels.load_backend("python")
    rng = make_rng(k * 1000 + s * 100 + p * 10 + d)
    x = rng.standard_normal((2, 3, 11, 9)).astype(dtype)
    a, b = c.im2col(x, k, s, p, d), py.im2col(x, k, s, p, d)
    assert a.dtype == dtype and a.tobytes() == b.tobytes()
    g = rng.standard_normal(a.shape).astype(dtype)
    assert c.col2im(g, x.shape, k, s, p, d).tobytes() == py.col2im(g, x.shape, k, s, p, d).tobytes()


@pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled extension not built")
@pytest.mark.parametrize("k,s", [(2, 2), (3, 2), (3, 1), (1, 1)])
def test_pool_kernels_match(k, s):
    c, py = kernels.load_backend("cython"), kernels.load_backend("python")
    rng = make_rng(k * 10 + s)
    x = np.round(rng.standard_normal((2, 3, 9, 10)) * 2).astype(np.float32)  # forces ties
    y1, i1 = c.maxpool_forward(x, k, s)
    y2, i2 = py.maxpool_forward(x, k, s)
    assert np.array_equal(y1, y2) and np.array_equal(i1, i2)
    g = rng.standard_normal(y1.shape).astype(np.float32)
    assert c.maxpool_backward(g, i1, x.shape).tobytes() == py.maxpool_backward(g, i1, x.shape).tobytes()


@pytest.mark.parametrize("name", BACKENDS)
def test_im2col_col2im_adjoint(name):
    # <im2col(x), g> == <x, col2im(g)>
    b = kernels.load_backend(name)
    rng = make_rng(7)
    x = rng.standard_normal((1, 2, 7, 7))
    cols = b.im2col(x, 3, 2, 1, 2)
    g = rng.standard_normal(cols.shape)
    assert np.isclose((cols * g).sum(), (x * b.col2im(g, x.shape, 3, 2, 1, 2)).sum())


def test_use_backend_switches_layers(rng):
    from mcnet.layers import ConvSpec, conv2d_forward
    x = rng.standard_normal((2, 6, 6)).astype(np.float32)
    spec = ConvSpec(3, 2, 3, padding=1)
    w = rng.standard_normal(spec.weight_dims).astype(np.float32)
    outs = {}
    start = kernels.BACKEND
    try:
        for name in kernels.available_backends():
            kernels.use_backend(name)
            assert kernels.BACKEND == name
            outs[name] = conv2d_forward(x, spec, w)
    finally:
        kernels.use_backend(start)
    vals = list(outs.values())
    assert all(np.array_equal(vals[0], v) for v in vals[1:])



def test_benchmark_script_runs():
    script = Path(__file__).resolve().parents[1] / "benchmarks" / "bench_kernels.py"
    proc = subprocess.run([sys.executable, str(script), "--config", "tiny", "--repeat", "1"],
                          capture_output=True, text=True, check=True)
    rows = proc.stdout.splitlines()
    assert rows[0].startswith("case")
    assert any(r.startswith("forward tiny") for r in rows)
