"""Compare the compiled and numpy kernel backends.

Times each hot kernel on layer-sized inputs, then one full forward pass of a
bundled config, once per available backend.

    python3 benchmarks/bench_kernels.py --config default --repeat 5
"""

import argparse
import statistics
import time

import numpy as np

from mcnet import kernels
from mcnet.arch import load_arch
from mcnet.model import build_model, forward
from mcnet.tensor import make_rng


def timeit(fn, repeat):
    fn()  # warm caches and lazy imports
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times) * 1e3


def kernel_cases(rng):
    x = rng.standard_normal((1, 16, 113, 113)).astype(np.float32)
    cols = kernels.load_backend("python").im2col(x, 3, 1, 1, 1)
    pool_in = rng.standard_normal((1, 32, 56, 56)).astype(np.float32)
    _, idx = kernels.load_backend("python").maxpool_forward(pool_in, 3, 2)
    grad_pool = rng.standard_normal(idx.shape).astype(np.float32)
    return {
        "im2col 16x113x113 k3": lambda: kernels.im2col(x, 3, 1, 1, 1),
        "im2col 16x113x113 k3 d2": lambda: kernels.im2col(x, 3, 1, 2, 2),
        "col2im 16x113x113 k3": lambda: kernels.col2im(cols, x.shape, 3, 1, 1, 1),
        "maxpool fwd 32x56x56 k3 s2": lambda: kernels.maxpool_forward(pool_in, 3, 2),
        "maxpool bwd 32x56x56 k3 s2": lambda: kernels.maxpool_backward(grad_pool, idx, pool_in.shape),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="default")
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    rng = make_rng(args.seed)
    cases = kernel_cases(rng)
    config = load_arch(args.config)
    model = build_model(config, make_rng(args.seed))
    frame = rng.uniform(0, 1, size=(1, *config.input_shape)).astype(np.float32)
    cases[f"forward {args.config} {'x'.join(map(str, config.input_shape))}"] = lambda: forward(model, frame)

    backends = kernels.available_backends()
    start = kernels.BACKEND
    results = {}
    try:
        for name in backends:
            kernels.use_backend(name)
            results[name] = {case: timeit(fn, args.repeat) for case, fn in cases.items()}
    finally:
        kernels.use_backend(start)

    header = f"{'case':32s}" + "".join(f"{b:>12s}" for b in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10s}"
    print(header + "   (median ms)")
    for case in cases:
        row = f"{case:32s}" + "".join(f"{results[b][case]:12.2f}" for b in backends)
        if len(backends) == 2:
            row += f"{results['python'][case] / results['cython'][case]:9.2f}x"
        print(row)


if __name__ == "__main__":
    main()
