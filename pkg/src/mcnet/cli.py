"""``mcnet`` command-line entry point.

Exit codes: 0 success, 1 I/O error, 2 validation or threshold failure.
"""

import argparse
import sys
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from mcnet import kernels
from mcnet.analysis import analysis_report, analyze
from mcnet.arch import ArchError, CONFIG_DIR, load_arch
from mcnet.data import load_images, load_manifest, preprocess, split, synth_generate, write_synth
from mcnet.model import DensityLevel, build_model, forward, load_weights, predict, save_weights
from mcnet.pixmap import ImageBuffer, PixmapError, read_pixmap, write_pixmap
from mcnet.tensor import make_rng
from mcnet.training import TrainConfig, evaluate, grad_check_report, metrics_csv, pr_csv, train

EXIT_OK, EXIT_IO, EXIT_INVALID = 0, 1, 2


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _config(path):
    p = Path(path)
    if not p.exists() and not (not p.suffix and (CONFIG_DIR / f"{p.name}.arch").exists()):
        raise CliError(f"config not found: {path}", EXIT_IO)
    try:
        return load_arch(path)
    except ArchError as exc:
        raise CliError(f"{path}: {exc}", EXIT_INVALID) from None


def _model(config, weights, seed=0):
    if weights is None:
        return build_model(config, make_rng(seed))
    try:
        return load_weights(config, weights)
    except OSError as exc:
        raise CliError(f"cannot read weights {weights}: {exc}", EXIT_IO) from None


def _image(config, path):
    try:
        img = read_pixmap(path)
    except OSError as exc:
        raise CliError(f"cannot read image {path}: {exc}", EXIT_IO) from None
    c, h, w = config.input_shape
    return preprocess(img, (h, w), c)


def _shape(text):
    parts = text.lower().split("x")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad shape {text!r}") from None
    return dims


# -- subcommands -----------------------------------------------------------

def cmd_analyze(args):
    config = _config(args.config)
    shape = args.input_shape or config.input_shape
    try:
        report = analyze(config, shape)
        print(analysis_report(config, shape, args.format), end="")
    except ArchError as exc:
        raise CliError(str(exc), EXIT_INVALID) from None
    if not report.covers_input:
        msg = f"receptive field {report.rf_final} does not cover input {shape[1]}x{shape[2]}"
        if args.warn_only:
            print(f"warning: {msg}", file=sys.stderr)
        else:
            raise CliError(msg, EXIT_INVALID)
    return EXIT_OK


def cmd_synth(args):
    samples = synth_generate(args.per_class, tuple(args.size), make_rng(args.seed))
    manifest = write_synth(samples, args.out)
    print(f"wrote {len(samples)} images and {manifest}")
    return EXIT_OK


def cmd_train(args):
    config = _config(args.config)
    try:
        manifest = load_manifest(args.data)
    except OSError as exc:
        raise CliError(f"cannot read manifest {args.data}: {exc}", EXIT_IO) from None
    test = None
    if args.split:
        manifest, test = split(manifest, args.split, make_rng(args.seed))
    c, h, w = config.input_shape
    x, y = load_images(manifest, (h, w), c)
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch, lr=args.lr, momentum=args.momentum,
                      seed=args.seed, decay_epoch=args.decay_epoch)
    model = build_model(config, make_rng(args.seed))

    def report(m):
        print(f"epoch {m.epoch + 1}/{cfg.epochs} loss={m.loss:.4f} acc={m.accuracy:.4f}", flush=True)

    history = train(model, x, y, cfg, report)
    save_weights(model, args.out)
    if args.metrics:
        Path(args.metrics).write_text(metrics_csv(history), encoding="utf-8")
    if test is not None and len(test):
        tx, ty = load_images(test, (h, w), c)
        result = evaluate(model, tx, ty)
        print(f"test_accuracy={result.accuracy:.4f}")
        if args.pr:
            Path(args.pr).write_text(pr_csv(result), encoding="utf-8")
    return EXIT_OK


def cmd_predict(args):
    config = _config(args.config)
    model = _model(config, args.weights)
    level, probs = predict(model, _image(config, args.image))
    name = level.label if isinstance(level, DensityLevel) else str(level)
    print(f"level={name} probs={','.join(f'{p:.6f}' for p in probs)}")
    return EXIT_OK


@dataclass
class BenchStats:
    iterations: int
    warmup: int
    threads: int
    latencies_ms: list
    mean: float
    median: float
    p95: float
    min: float
    max: float
    throughput: float  # frames per second over all workers

    @classmethod
    def from_latencies(cls, lat_ms, warmup, threads, wall_s):
        a = np.asarray(lat_ms, dtype=np.float64)
        return cls(len(a), warmup, threads, list(a), float(a.mean()), float(np.median(a)),
                   float(np.percentile(a, 95)), float(a.min()), float(a.max()), len(a) / wall_s)

    def render(self):
        return (f"iters={self.iterations} warmup={self.warmup} threads={self.threads} "
                f"mean_ms={self.mean:.3f} median_ms={self.median:.3f} p95_ms={self.p95:.3f} "
                f"min_ms={self.min:.3f} max_ms={self.max:.3f} fps={self.throughput:.1f}")


def run_bench(model, iters, warmup, threads=1, seed=0):
    """Time single-image forwards; each worker does ``warmup`` untimed then ``iters`` timed runs."""
    x = make_rng(seed).uniform(0, 1, size=model.config.input_shape).astype(np.float32)
    per_worker = [[] for _ in range(threads)]

    def worker(out):
        for _ in range(warmup):
            forward(model, x)
        for _ in range(iters):
            t0 = time.perf_counter()
            forward(model, x)
            out.append((time.perf_counter() - t0) * 1e3)

    start = time.perf_counter()
    if threads == 1:
        worker(per_worker[0])
    else:
        pool = [threading.Thread(target=worker, args=(out,)) for out in per_worker]
        for t in pool:
            t.start()
        for t in pool:
            t.join()
    wall = time.perf_counter() - start
    lat = [v for out in per_worker for v in out]
    return BenchStats.from_latencies(lat, warmup, threads, wall)


def cmd_bench(args):
    config = _config(args.config)
    model = _model(config, args.weights, args.seed)
    stats = run_bench(model, args.iters, args.warmup, args.threads, args.seed)
    print(f"config={args.config} backend={kernels.BACKEND}")
    print(stats.render())
    if args.raw:
        print("latencies_ms=" + ",".join(f"{v:.3f}" for v in stats.latencies_ms))
    return EXIT_OK


def cmd_gradcheck(args):
    config = _config(args.config)
    rep = grad_check_report(config, args.seed, args.eps)
    print(f"max_rel_error={rep.max_rel_error:.3e} checked={rep.checked} skipped={rep.skipped} "
          f"worst={rep.worst}")
    return EXIT_OK if rep.max_rel_error < args.tol else EXIT_INVALID


def normalize_activation(act):
    """Min-max scale the whole C x H x W activation to [0, 1]."""
    lo, hi = float(act.min()), float(act.max())
    if hi <= lo:
        return np.zeros_like(act, dtype=np.float64)
    return (act.astype(np.float64) - lo) / (hi - lo)


def cmd_inspect(args):
    config = _config(args.config)
    model = _model(config, args.weights)
    try:
        config.layer(args.layer)
    except KeyError as exc:
        raise CliError(str(exc.args[0]), EXIT_INVALID) from None
    _, captured = forward(model, _image(config, args.image), capture=[args.layer])
    act = captured[args.layer]
    norm = normalize_activation(act)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for c in range(norm.shape[0]):
        px = np.rint(norm[c] * 255).astype(np.uint8)
        write_pixmap(out / f"{args.layer}_c{c:03d}.pgm", ImageBuffer.from_array(px))
    print(f"layer={args.layer} channels={norm.shape[0]} shape={'x'.join(map(str, act.shape))} "
          f"mean_activation={float(act.mean()):.6f} mean_normalized={float(norm.mean()):.6f}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="mcnet", description="MCNet crowd-density toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="receptive field, params and MACs per layer")
    a.add_argument("--config", required=True, help="config path or bundled name (default, small, ...)")
    a.add_argument("--input-shape", type=_shape, default=None, help="CxHxW (defaults to the config's)")
    a.add_argument("--format", choices=["text", "csv"], default="text")
    a.add_argument("--warn-only", action="store_true", help="do not fail when RF misses the input")
    a.set_defaults(func=cmd_analyze)

    s = sub.add_parser("synth", help="write a synthetic crowd dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--per-class", type=int, default=150)
    s.add_argument("--size", type=_shape, default=(64, 64), help="HxW")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train on a manifest")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True, help="manifest with path<TAB>label lines")
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--lr", type=float, default=0.01)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--batch", type=int, default=32)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--decay-epoch", type=int, default=None, help="multiply lr by 0.1 from this epoch")
    t.add_argument("--split", type=float, default=None, help="train fraction; evaluates on the rest")
    t.add_argument("--out", required=True, help="weights file to write")
    t.add_argument("--metrics", default=None, help="per-epoch CSV (epoch,loss,accuracy)")
    t.add_argument("--pr", default=None, help="PR points CSV for the held-out split")
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="classify one image")
    pr.add_argument("--config", required=True)
    pr.add_argument("--weights", required=True)
    pr.add_argument("--image", required=True)
    pr.set_defaults(func=cmd_predict)

    b = sub.add_parser("bench", help="single-image inference latency")
    b.add_argument("--config", required=True)
    b.add_argument("--weights", default=None)
    b.add_argument("--iters", type=int, default=20)
    b.add_argument("--warmup", type=int, default=3)
    b.add_argument("--threads", type=int, default=1)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--raw", action="store_true", help="also print every latency")
    b.set_defaults(func=cmd_bench)

    g = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    g.add_argument("--config", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--eps", type=float, default=1e-3)
    g.add_argument("--tol", type=float, default=1e-3)
    g.set_defaults(func=cmd_gradcheck)

    i = sub.add_parser("inspect", help="dump one layer's activations as P5 images")
    i.add_argument("--config", required=True)
    i.add_argument("--weights", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--layer", required=True)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    if getattr(args, "iters", 1) < 1 or getattr(args, "threads", 1) < 1:
        print("error: --iters and --threads must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (PixmapError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
