import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcnet.arch import load_arch, parse_arch
from mcnet.model import build_model
from mcnet.tensor import make_rng
from mcnet.training import (
    TrainConfig,
    evaluate,
    grad_check,
    grad_check_report,
    metrics_csv,
    pr_csv,
    pr_curve,
    sgd_step,
    train,
    train_epoch,
)

TOY = parse_arch("input 1x8x8\nconv out=8 k=3 p=1\nconv out=3 k=1\ngap\nclasses 3\n")
LINEAR = parse_arch("input 1x1x1\nconv out=3 k=1\ngap\nclasses 3\n")


def toy_data(rng, n=200):
    """Three intensity bands with no overlap: separable by a threshold on the mean."""
    y = np.arange(n) % 3
    level = np.array([0.2, 0.5, 0.8])[y]
    x = level[:, None, None, None] + rng.uniform(-0.1, 0.1, size=(n, 1, 8, 8))
    return x.astype(np.float32), y


def one_param_model(value=1.0):
    m = build_model(LINEAR, make_rng(0))
    for k in m.params:
        m.params[k][...] = value
    return m


# -- sgd -------------------------------------------------------------------

def test_vanilla_step():
    m = one_param_model()
    g = {k: np.full_like(p, 0.5) for k, p in m.params.items()}
    for k in m.grads:
        m.grads[k][...] = g[k]
    sgd_step(m, lr=0.1, momentum=0.0)
    for k, p in m.params.items():
        assert np.allclose(p, 1.0 - 0.1 * 0.5)
        assert not m.grads[k].any()


def test_zero_grads_leave_params():
    m = one_param_model()
    before = {k: p.copy() for k, p in m.params.items()}
    sgd_step(m, lr=0.5, momentum=0.9)
    assert all(np.array_equal(before[k], m.params[k]) for k in before)


def test_momentum_two_steps():
    m = one_param_model(0.0)
    for _ in range(2):
        for k in m.grads:
            m.grads[k][...] = 0.25
        sgd_step(m, lr=1.0, momentum=0.9)
    # step 1 moves by g, step 2 by 0.9 g + g
    for p in m.params.values():
        assert np.allclose(p, -(0.25 + 1.9 * 0.25))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(momentum=1.0)
    with pytest.raises(ValueError):
        TrainConfig(lr=-0.1)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    assert TrainConfig(lr=0.1, decay_epoch=3).lr_at(3) == pytest.approx(0.01)
    assert TrainConfig(lr=0.1, decay_epoch=3).lr_at(2) == 0.1


# -- training loop ---------------------------------------------------------

def test_equal_logits_give_ln3():
    m = build_model(TOY, make_rng(0))
    m.params["L1_conv.weight"][...] = 0
    x = np.repeat(toy_data(make_rng(0), 3)[0][:1], 8, axis=0)
    metrics = train_epoch(m, x, np.zeros(8, dtype=np.int64), TrainConfig(lr=0.0), make_rng(0))
    assert metrics.loss == pytest.approx(math.log(3))


def test_lr_zero_keeps_params_bit_identical():
    x, y = toy_data(make_rng(1), 60)
    m = build_model(TOY, make_rng(2))
    before = {k: p.copy() for k, p in m.params.items()}
    train(m, x, y, TrainConfig(epochs=2, lr=0.0))
    assert all(np.array_equal(before[k], m.params[k]) for k in before)


def test_same_seed_same_weights():
    x, y = toy_data(make_rng(1), 90)
    runs = []
    for _ in range(2):
        m = build_model(TOY, make_rng(4))
        train(m, x, y, TrainConfig(epochs=3, seed=9))
        runs.append(m.params)
    assert all(np.array_equal(runs[0][k], runs[1][k]) for k in runs[0])


def test_toy_reaches_full_accuracy_and_loss_keeps_falling():
    x, y = toy_data(make_rng(0))
    m = build_model(TOY, make_rng(0))
    history = train(m, x, y, TrainConfig(epochs=50, seed=0))
    assert any(h.accuracy == 1.0 for h in history)
    assert history[-1].accuracy == 1.0
    losses = [h.loss for h in history]
    assert all(losses[i + 5] <= losses[i] for i in range(len(losses) - 5))


def test_empty_dataset_rejected():
    m = build_model(TOY, make_rng(0))
    with pytest.raises(ValueError):
        train_epoch(m, np.zeros((0, 1, 8, 8), np.float32), np.zeros(0, np.int64), TrainConfig(), make_rng(0))
    with pytest.raises(ValueError):
        evaluate(m, np.zeros((0, 1, 8, 8), np.float32), np.zeros(0, np.int64))


def test_metrics_csv():
    x, y = toy_data(make_rng(1), 30)
    history = train(build_model(TOY, make_rng(0)), x, y, TrainConfig(epochs=2))
    lines = metrics_csv(history).splitlines()
    assert lines[0] == "epoch,loss,accuracy" and len(lines) == 3


# -- evaluation ------------------------------------------------------------

def _linear_with_logits(rows):
    """A LINEAR model whose logits are row-dependent: logit_c = w_c * x."""
    m = build_model(LINEAR, make_rng(0))
    m.params["L0_conv.weight"][...] = np.asarray(rows, np.float32).reshape(3, 1, 1, 1)
    return m


def test_perfect_and_constant_predictors():
    # weights (-1, 0, 1) plus a bias on class 1 send inputs -5, 0, 5 to classes 0, 1, 2
    x = np.array([-5.0, 0.0, 5.0] * 4, np.float32).reshape(-1, 1, 1, 1)
    y = np.array([0, 1, 2] * 4)
    m = _linear_with_logits([-1, 0, 1])
    m.params["L0_conv.bias"][...] = np.array([0, 1, 0], np.float32)
    res = evaluate(m, x, y)
    assert res.accuracy == 1.0
    assert np.array_equal(res.confusion, np.diag([4, 4, 4]))
    const = evaluate(_linear_with_logits([0, 0, 0]), x, y)
    assert const.accuracy == pytest.approx(1 / 3)
    assert const.confusion.sum() == 12 and np.array_equal(const.confusion.sum(axis=1), [4, 4, 4])


def brute_force_pr(scores, positives):
    points = []
    for t in sorted(set(scores.tolist()), reverse=True):
        pred = scores >= t
        tp = int(np.sum(pred & positives))
        fp = int(np.sum(pred & ~positives))
        n_pos = int(positives.sum())
        points.append((t, tp / (tp + fp), tp / n_pos if n_pos else 0.0))
    return points


def test_pr_curve_matches_enumeration():
    rng = make_rng(8)
    scores = np.round(rng.uniform(0, 1, size=30), 2)  # rounding creates tied scores
    positives = rng.uniform(size=30) < 0.4
    assert pr_curve(scores, positives) == brute_force_pr(scores, positives)


@settings(max_examples=50)
@given(st.lists(st.tuples(st.floats(0, 1), st.booleans()), min_size=1, max_size=40))
def test_pr_points_valid(pairs):
    scores = np.array([p[0] for p in pairs])
    positives = np.array([p[1] for p in pairs])
    pts = pr_curve(scores, positives)
    recalls = [r for _, _, r in pts]
    assert all(0 <= p <= 1 and 0 <= r <= 1 for _, p, r in pts)
    assert recalls == sorted(recalls)


def test_evaluate_pr_and_csv():
    x, y = toy_data(make_rng(3), 30)
    res = evaluate(build_model(TOY, make_rng(0)), x, y)
    assert set(res.pr_curves) == {0, 1, 2}
    assert np.allclose(res.probs.sum(axis=1), 1.0)
    assert pr_csv(res).splitlines()[0] == "class,threshold,precision,recall"


# -- gradient check --------------------------------------------------------

def test_grad_check_plain_tiny():
    cfg = parse_arch("input 2x6x6\nconv out=3 k=3 p=1\nconv out=4 k=3 p=2 d=2\nconv out=3 k=1\ngap\nclasses 3\n")
    assert grad_check(cfg, seed=0, eps=1e-3) < 1e-3


def test_grad_check_with_ima():
    report = grad_check_report(load_arch("tiny"), seed=0, eps=1e-3)
    assert report.max_rel_error < 1e-3
    assert report.checked >= report.skipped


def test_grad_check_rejects_zero_eps():
    with pytest.raises(ValueError):
        grad_check(load_arch("tiny"), eps=0)
