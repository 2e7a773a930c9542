"""SGD with momentum, evaluation metrics and the whole-model gradient checker."""

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from mcnet.layers import softmax, softmax_cross_entropy_batch
from mcnet.model import backward, build_model, forward_train
from mcnet.tensor import make_rng


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    shuffle: bool = True
    decay_epoch: int = None  # multiply lr by ``decay`` from this epoch on
    decay: float = 0.1

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")

    def lr_at(self, epoch):
        if self.decay_epoch is not None and epoch >= self.decay_epoch:
            return self.lr * self.decay
        return self.lr


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    accuracy: float


@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray  # rows = true class, cols = predicted
    pr_curves: dict = field(default_factory=dict)  # class -> [(threshold, precision, recall)]
    probs: np.ndarray = None


def sgd_step(model, lr, momentum):
    """v <- momentum * v + g ; p <- p - lr * v ; grads zeroed."""
    for name, p in model.params.items():
        v = model.momentum[name]
        v *= momentum
        v += model.grads[name]
        p -= np.asarray(lr, dtype=p.dtype) * v
    model.zero_grads()


def train_epoch(model, x, y, cfg, rng, epoch=0):
    n = len(y)
    if n == 0:
        raise ValueError("empty dataset")
    order = rng.permutation(n) if cfg.shuffle else np.arange(n)
    lr = cfg.lr_at(epoch)
    total_loss, correct = 0.0, 0
    for start in range(0, n, cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        logits, caches, _ = forward_train(model, x[idx])
        loss, grad = softmax_cross_entropy_batch(logits, y[idx])
        backward(model, caches, grad)
        sgd_step(model, lr, cfg.momentum)
        total_loss += loss * len(idx)
        correct += int((logits.argmax(axis=1) == y[idx]).sum())
    return EpochMetrics(epoch, total_loss / n, correct / n)


def train(model, x, y, cfg, on_epoch=None):
    """Run ``cfg.epochs`` epochs; the shuffle stream comes from ``cfg.seed``."""
    rng = make_rng(cfg.seed)
    history = []
    for epoch in range(cfg.epochs):
        m = train_epoch(model, x, y, cfg, rng, epoch)
        history.append(m)
        if on_epoch is not None:
            on_epoch(m)
    return history


def predict_probs(model, x, batch_size=64):
    out = []
    for start in range(0, len(x), batch_size):
        logits, _, _ = forward_train(model, x[start:start + batch_size])
        out.append(softmax(logits.astype(np.float64), "channel"))
    return np.concatenate(out)


def pr_curve(scores, positives):
    """One-vs-rest points (threshold, precision, recall), thresholds descending.

    A sample counts as predicted positive when its score >= threshold; every
    distinct score is a threshold, so recall is non-decreasing along the list.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    order = np.argsort(-scores, kind="stable")
    s, pos = scores[order], positives[order]
    tp = np.cumsum(pos)
    fp = np.cumsum(~pos)
    n_pos = int(pos.sum())
    last_of_run = np.r_[s[1:] != s[:-1], True]
    points = []
    for i in np.flatnonzero(last_of_run):
        precision = tp[i] / (tp[i] + fp[i])
        recall = tp[i] / n_pos if n_pos else 0.0
        points.append((float(s[i]), float(precision), float(recall)))
    return points


def evaluate(model, x, y, class_count=None):
    if len(y) == 0:
        raise ValueError("empty dataset")
    k = class_count or model.config.class_count
    probs = predict_probs(model, x)
    pred = probs.argmax(axis=1)
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (np.asarray(y), pred), 1)
    curves = {c: pr_curve(probs[:, c], np.asarray(y) == c) for c in range(k)}
    return EvalResult(float(np.trace(confusion)) / len(y), confusion, curves, probs)


def metrics_csv(history):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "loss", "accuracy"])
    for m in history:
        w.writerow([m.epoch, f"{m.loss:.6f}", f"{m.accuracy:.6f}"])
    return buf.getvalue()


def pr_csv(result):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "threshold", "precision", "recall"])
    for c, points in result.pr_curves.items():
        for t, p, r in points:
            w.writerow([c, f"{t:.9g}", f"{p:.6f}", f"{r:.6f}"])
    return buf.getvalue()


# -- gradient check --------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    skipped: int  # coordinates whose +/- eps probes flip a ReLU mask or pooling winner
    worst: str


def _decision_signature(caches):
    """Every discrete branch the forward took: ReLU signs and max-pool winners."""
    parts = []

    def walk(obj):
        if isinstance(obj, dict):
            for key in sorted(obj):
                v = obj[key]
                if key in ("pre", "s_pre", "e1_pre", "e3_pre", "z"):
                    parts.append((v > 0).tobytes())
                elif key == "argmax":
                    parts.append(v.tobytes())
                elif key == "branches":
                    for b in v:
                        walk(b)
    for c in caches:
        walk(c)
    return b"".join(parts)


def _loss(model, x, y):
    logits, caches, _ = forward_train(model, x)
    loss, grad = softmax_cross_entropy_batch(logits, y)
    return loss, grad, caches


def rel_error(a, n):
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def grad_check_report(config, seed=0, eps=1e-3, samples=2):
    """Compare analytic and central-difference gradients for every parameter and input.

    Runs in float64. Coordinates whose probes change the network's discrete
    decisions are skipped: the loss is not differentiable across those kinks.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    rng = make_rng(seed)
    model = build_model(config, rng).astype(np.float64)
    for name, p in model.params.items():  # non-zero biases so their paths are exercised
        if name.endswith(".bias"):
            p[...] = rng.uniform(-0.1, 0.1, size=p.shape)
    x = rng.uniform(0.0, 1.0, size=(samples, *config.input_shape))
    y = rng.integers(0, config.class_count, size=samples)

    model.zero_grads()
    _, grad, caches = _loss(model, x, y)
    grad_x = backward(model, caches, grad)
    base_sig = _decision_signature(caches)
    analytic = {name: g.copy() for name, g in model.grads.items()}
    analytic["input"] = grad_x

    worst, worst_at, checked, skipped = 0.0, "", 0, 0
    targets = list(model.params.items()) + [("input", x)]
    for name, arr in targets:
        flat = arr.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lp, _, cp = _loss(model, x, y)
            flat[i] = orig - eps
            lm, _, cm = _loss(model, x, y)
            flat[i] = orig
            if not (math.isfinite(lp) and math.isfinite(lm)):
                raise FloatingPointError(f"non-finite loss while probing {name}[{i}]")
            if _decision_signature(cp) != base_sig or _decision_signature(cm) != base_sig:
                skipped += 1
                continue
            num = (lp - lm) / (2 * eps)
            err = rel_error(float(a_flat[i]), num)
            checked += 1
            if err > worst:
                worst, worst_at = err, f"{name}[{i}]"
    return GradCheckReport(worst, checked, skipped, worst_at)


def grad_check(config, seed=0, eps=1e-3):
    """Max relative error max(|a-n| / max(|a|, |n|, 1e-8)) over all checked entries."""
    return grad_check_report(config, seed, eps).max_rel_error
