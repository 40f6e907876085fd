import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cardionet.errors import ConfigError, DomainError, EmptyInputError, NumericError
from cardionet.synthetic import make_synthetic
from cardionet.training import (SGD, Adam, EpochLog, TrainConfig, bce_loss, early_stop_check,
                                evaluate_accuracy, format_epoch_log, optimizer_step,
                                parse_epoch_log, train)
from cardionet.unet import UNetConfig, build_unet

from oracles import numeric_grad, rel_error

TINY = UNetConfig(depth=2, base_width=4, convs_per_block=1, input_size=16)


def tiny_data(n=12, seed=0):
    return make_synthetic(n, 16, seed)


# --------------------------------------------------------------------- loss

def test_bce_half_is_ln2():
    for t in (0, 1):
        loss, _ = bce_loss(0.5, t)
        assert loss == pytest.approx(math.log(2), abs=1e-12)


def test_bce_perfect_prediction_and_clamp():
    assert bce_loss(1.0, 1)[0] < 1e-6
    loss, grad = bce_loss(0.0, 1)
    assert loss == pytest.approx(-math.log(1e-7)) and math.isfinite(grad)


@given(st.floats(1e-6, 1 - 1e-6))
def test_bce_symmetry(s):
    assert bce_loss(s, 1)[0] == pytest.approx(bce_loss(1 - s, 0)[0], rel=1e-9)


def test_bce_bad_target():
    with pytest.raises(DomainError):
        bce_loss(0.3, 0.5)


def test_bce_gradient_matches_finite_difference():
    rng = np.random.default_rng(0)
    s = rng.uniform(0.05, 0.95, 25)
    t = (rng.uniform(size=25) > 0.5).astype(float)
    _, g = bce_loss(s, t)
    num = numeric_grad(lambda: float(np.sum(bce_loss(s, t)[0])), s, step=1e-6)
    assert rel_error(g, num) < 1e-6


# --------------------------------------------------------------- optimizers

def test_sgd_hand_value():
    p = {"w": np.array([1.0])}
    optimizer_step(p, {"w": np.array([0.5])}, SGD(lr=0.1))
    assert p["w"][0] == pytest.approx(0.95)


def test_sgd_momentum_accumulates():
    p = {"w": np.array([0.0])}
    opt = SGD(lr=1.0, momentum=0.9)
    for _ in range(2):
        optimizer_step(p, {"w": np.array([1.0])}, opt)
    assert p["w"][0] == pytest.approx(-(1 + 1.9))


@pytest.mark.parametrize("opt", [SGD(0.1), SGD(0.1, 0.9), Adam()])
def test_zero_gradient_is_noop(opt):
    p = {"w": np.array([1.0, -2.0])}
    optimizer_step(p, {"w": np.zeros(2)}, opt)
    assert p["w"].tolist() == [1.0, -2.0]


def test_adam_first_step_closed_form():
    p = {"w": np.array([0.0]), "v": np.array([0.0])}
    optimizer_step(p, {"w": np.array([1.0]), "v": np.array([-250.0])}, Adam(lr=1e-3))
    # bias-corrected m/sqrt(v) = g/|g| on the first step, whatever the scale
    assert p["w"][0] == pytest.approx(-1e-3, rel=1e-6)
    assert p["v"][0] == pytest.approx(1e-3, rel=1e-6)


def test_nan_gradient_aborts_before_update():
    p = {"a": np.array([1.0]), "b": np.array([2.0])}
    with pytest.raises(NumericError, match="'b'"):
        optimizer_step(p, {"a": np.array([0.5]), "b": np.array([np.nan])}, SGD(0.1))
    assert p["a"][0] == 1.0


def test_single_small_step_reduces_loss_in_aggregate():
    """One SGD step with small lr lowers that example's loss on nearly all instances."""
    cfg = UNetConfig(depth=1, base_width=2, convs_per_block=1, input_size=4)
    rng = np.random.default_rng(0)
    trials, improved = 60, 0
    for k in range(trials):
        m = build_unet(cfg, seed=k).astype(np.float64)
        x = rng.uniform(0, 1, (1, 1, 4, 4))
        t = np.array([float(rng.integers(0, 2))])
        m.zero_grad()
        before, ds = bce_loss(m.forward(x, "train").score, t)
        m.backward(ds)
        tr = m.trainable()
        optimizer_step({n: p.data for n, p in tr.items()},
                       {n: p.grad if p.grad is not None else np.zeros_like(p.data) for n, p in tr.items()},
                       SGD(lr=1e-3))
        after, _ = bce_loss(m.forward(x, "train").score, t)
        improved += float(after[0]) < float(before[0])
    assert improved / trials >= 0.95


# ----------------------------------------------------------- early stopping

@pytest.mark.parametrize("history,patience,expected", [
    ([85, 86, 87], 2, (False, 2)),
    ([90, 89, 89.5], 2, (True, 0)),
    ([90, 89, 89.5], 3, (False, 0)),
    ([80, 90, 90, 90], 2, (True, 1)),     # ties do not count as improvement
    ([1], 1, (False, 0)),
])
def test_early_stop_examples(history, patience, expected):
    assert tuple(early_stop_check(history, patience)) == expected


def test_early_stop_empty():
    with pytest.raises(EmptyInputError):
        early_stop_check([], 2)


# --------------------------------------------------------------------- loop

def test_config_validation():
    for bad in ({"epochs": 0}, {"batch_size": 0}, {"lr": 0}, {"patience": 0}, {"optimizer": "rmsprop"}):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"epochs": 3, "warmup": 1})


def test_twenty_epochs_twenty_rows():
    data, tensors, _ = tiny_data(8)
    _, logs = train(build_unet(TINY, 0), data, tensors,
                    TrainConfig(epochs=20, batch_size=8, early_stop=False))
    assert [e.epoch for e in logs] == list(range(1, 21))
    assert all(0 <= e.train_accuracy <= 100 and e.train_loss >= 0 for e in logs)


def test_log_initial_adds_epoch_zero():
    data, tensors, _ = tiny_data(8)
    _, logs = train(build_unet(TINY, 0), data, tensors,
                    TrainConfig(epochs=2, batch_size=8, early_stop=False, log_initial=True))
    assert [e.epoch for e in logs] == [0, 1, 2] and logs[0].train_loss is None


def test_training_is_deterministic():
    data, tensors, _ = tiny_data()
    cfg = TrainConfig(epochs=3, batch_size=4, early_stop=False, seed=2)
    m1, l1 = train(build_unet(TINY, 1), data, tensors, cfg)
    m2, l2 = train(build_unet(TINY, 1), data, tensors, cfg)
    assert format_epoch_log(l1) == format_epoch_log(l2)
    assert [e.train_loss for e in l1] == [e.train_loss for e in l2]
    for k in m1.params:
        assert m1.params[k].data.tobytes() == m2.params[k].data.tobytes()


def test_early_stop_restores_best_parameters():
    data, tensors, _ = tiny_data(16, seed=3)
    cfg = TrainConfig(epochs=12, batch_size=4, lr=3e-2, early_stop=True, patience=2, seed=1)
    model, logs = train(build_unet(TINY, 4), data, tensors, cfg)
    best = max(e.val_accuracy for e in logs)
    assert evaluate_accuracy(model, data.val, tensors) == best


def test_nonfinite_loss_reports_coordinates(monkeypatch):
    import cardionet.training as tr
    data, tensors, _ = tiny_data(8)
    monkeypatch.setattr(tr, "bce_loss", lambda s, t: (np.full(len(t), np.nan), np.zeros(len(t))))
    with pytest.raises(NumericError, match="epoch 1, batch 0"):
        train(build_unet(TINY, 0), data, tensors, TrainConfig(epochs=1, batch_size=4))


def test_empty_validation_rejected():
    from cardionet.dataset import DatasetSplit
    data, tensors, _ = tiny_data(8)
    with pytest.raises(ConfigError):
        train(build_unet(TINY, 0), DatasetSplit(data.train, [], 0, 0.8), tensors, TrainConfig(epochs=1))


# ---------------------------------------------------------------- CSV schema

def test_epoch_log_csv_roundtrip():
    logs = [EpochLog(0, 85.1, 85.0), EpochLog(5, 87.3, 85.0, 0.123456)]
    text = format_epoch_log(logs)
    assert text == "epoch,train_accuracy,val_accuracy,train_loss\n0,85.1,85.0,\n5,87.3,85.0,0.1235\n"
    back = parse_epoch_log(text)
    assert back[0] == logs[0] and back[1].train_loss == pytest.approx(0.1235)
