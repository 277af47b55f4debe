"""Tests for the train module."""

import math
import os
from dataclasses import replace

import numpy as np
import pytest

from filmseg.pipeline import read_manifest, write_manifest
from filmseg.tensor import Tape, Tensor, backward, precision, softmax_channel
from filmseg.train import (BEST_CHECKPOINT, HISTORY_FILE, LAST_CHECKPOINT, AdamW, EpochRecord, SGDNesterov,
                           TrainConfig, TrainingError, TrainingHistory, build_optimizer, combined_loss,
                           cross_entropy_loss, learning_rate_at, read_history_csv, soft_dice_loss, train,
                           write_history_csv)
from filmseg.unet import Placement, load_checkpoint


def _one_hot(target):
    return np.stack([target == 0, target == 1], axis=1).astype(np.float64)


def test_dice_loss_perfect_prediction():
    """Test Dice loss of a perfect prediction."""
    target = np.zeros((1, 2, 2, 2), dtype=np.uint8)
    target[0, 0] = 1
    assert soft_dice_loss(Tensor(_one_hot(target)), target).item() <= 1e-4


def test_dice_loss_total_miss():
    """Test Dice loss of a complete miss."""
    target = np.ones((1, 2, 2, 2), dtype=np.uint8)
    probs = np.zeros((1, 2, 2, 2, 2))
    probs[:, 0] = 1.0
    assert soft_dice_loss(Tensor(probs), target).item() == pytest.approx(1.0, abs=1e-5)


def test_dice_loss_matches_direct_sum(rng):
    """Test Dice loss against direct sums."""
    with precision(np.float64):
        logits = rng.normal(size=(2, 2, 2, 2, 2))
        target = rng.integers(0, 2, size=(2, 2, 2, 2))
        probs = softmax_channel(Tensor(logits))
        loss = soft_dice_loss(probs, target).item()
    p = probs.data[:, 1]
    per_sample = [1 - (2 * (p[n] * target[n]).sum() + 1e-5) / (p[n].sum() + target[n].sum() + 1e-5)
                  for n in range(2)]
    assert loss == pytest.approx(np.mean(per_sample), abs=1e-6)


def test_cross_entropy_uniform_logits():
    """Test cross-entropy of uniform logits."""
    logits = Tensor(np.zeros((1, 2, 2, 2, 2)))
    target = np.zeros((1, 2, 2, 2), dtype=np.uint8)
    assert cross_entropy_loss(logits, target).item() == pytest.approx(math.log(2), abs=1e-6)


def test_cross_entropy_is_stable():
    """Test cross-entropy on large logits."""
    logits = np.zeros((1, 2, 1, 1, 1))
    logits[0, 0] = 1000.0
    value = cross_entropy_loss(Tensor(logits), np.zeros((1, 1, 1, 1), dtype=np.uint8)).item()
    assert math.isfinite(value)
    assert value == pytest.approx(0.0, abs=1e-6)


def test_cross_entropy_matches_direct(rng):
    """Test cross-entropy against a direct computation."""
    with precision(np.float64):
        logits = rng.normal(size=(1, 2, 2, 1, 1))
        target = np.array([[[[0]], [[1]]]])
        value = cross_entropy_loss(Tensor(logits), target).item()
    z = logits[0, :, :, 0, 0]
    expected = -np.mean([z[0, 0] - np.log(np.exp(z[:, 0]).sum()), z[1, 1] - np.log(np.exp(z[:, 1]).sum())])
    assert value == pytest.approx(expected, abs=1e-6)


def test_combined_loss_is_differentiable(rng):
    """Test gradients of the combined loss."""
    logits = Tensor(rng.normal(size=(1, 2, 2, 2, 2)), requires_grad=True)
    target = rng.integers(0, 2, size=(1, 2, 2, 2))
    with Tape() as tape:
        loss = combined_loss(logits, target, (1.0, 1.0))
    backward(tape, loss)
    assert logits.grad.shape == logits.shape
    assert np.isfinite(logits.grad).all()


def _quadratic_step(optimizer, p):
    p.grad = 2 * p.data
    optimizer.step(0.1)


def test_sgd_plain_gradient_descent():
    """Test SGD without momentum."""
    p = Tensor(np.array([1.0]), requires_grad=True)
    _quadratic_step(SGDNesterov([p], momentum=0.0), p)
    assert p.data[0] == pytest.approx(0.8)


def test_sgd_nesterov_update():
    """Test the Nesterov update."""
    p = Tensor(np.array([1.0]), requires_grad=True)
    optimizer = SGDNesterov([p], momentum=0.9)
    _quadratic_step(optimizer, p)
    # v = -0.2 ; p = 1 + 0.9 * v - 0.1 * 2
    assert p.data[0] == pytest.approx(1.0 - 0.18 - 0.2)
    assert optimizer.buffers["velocity"][0][0] == pytest.approx(-0.2)


def test_adamw_first_step_magnitude():
    """Test the size of the first AdamW step."""
    p = Tensor(np.array([0.5, -2.0]), requires_grad=True)
    optimizer = AdamW([p], weight_decay=0.0)
    p.grad = np.array([3.0, -0.25], dtype=np.float32)
    optimizer.step(1e-3)
    np.testing.assert_allclose(p.data, [0.5 - 1e-3, -2.0 + 1e-3], atol=1e-6)


def test_adamw_decay_only():
    """Test AdamW decoupled weight decay."""
    p = Tensor(np.array([2.0]), requires_grad=True)
    p.grad = np.zeros(1, dtype=np.float32)
    AdamW([p], weight_decay=0.1).step(0.01)
    assert p.data[0] == pytest.approx(2.0 * (1 - 0.01 * 0.1))


@pytest.mark.parametrize("make", [lambda ps: SGDNesterov(ps), lambda ps: AdamW(ps, weight_decay=0.0)])
def test_zero_gradient_fixpoint(make, rng):
    """Test that a zero gradient leaves parameters unchanged."""
    p = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    before = p.data.copy()
    optimizer = make([p])
    for _ in range(3):
        p.grad = np.zeros_like(p.data)
        optimizer.step(0.01)
    np.testing.assert_array_equal(p.data, before)


@pytest.mark.parametrize("kind", ["sgd", "adamw"])
def test_optimizer_state_round_trip(kind, rng):
    """Test saving and restoring optimizer state."""
    params = [Tensor(rng.normal(size=(2, 3)), requires_grad=True), Tensor(rng.normal(size=4), requires_grad=True)]
    config = TrainConfig(optimizer=kind)
    optimizer = build_optimizer(params, config)
    for _ in range(2):
        for p in params:
            p.grad = rng.normal(size=p.shape).astype(np.float32)
        optimizer.step(0.01)
    state = optimizer.state_dict()
    restored = build_optimizer(params, config)
    restored.load_state_dict(state)
    again = restored.state_dict()
    assert again["step"] == state["step"] == 2
    for name, buffers in state["buffers"].items():
        for a, b in zip(buffers, again["buffers"][name]):
            np.testing.assert_array_equal(a, b)


def test_state_dict_kind_mismatch():
    """Test restoring state from another optimizer."""
    p = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(TrainingError):
        AdamW([p]).load_state_dict(SGDNesterov([p]).state_dict())


def test_learning_rate_schedules():
    """Test the learning rate schedules."""
    config = TrainConfig(epochs=10, learning_rate=0.01)
    assert learning_rate_at(config, 0) == pytest.approx(0.01)
    assert learning_rate_at(config, 5) == pytest.approx(0.01 * 0.5 ** 0.9)
    assert learning_rate_at(replace(config, lr_schedule="constant"), 9) == pytest.approx(0.01)


def test_optimizer_defaults():
    """Test optimizer default settings."""
    assert TrainConfig(optimizer="sgd").lr == 0.01
    adamw = TrainConfig(optimizer="adamw")
    assert adamw.lr == 1e-3
    assert adamw.decay == 1e-2


def test_foreground_oversampling_default():
    """Test that half of the training patches are centred on tumor by default."""
    assert TrainConfig().fg_probability == 0.5


def test_history_best_epoch():
    """Test that the best epoch is the first one reaching the highest validation Dice."""
    history = TrainingHistory([EpochRecord(1, 0.9, 0.1, 0.01), EpochRecord(2, 0.7, 0.4, 0.008),
                               EpochRecord(3, 0.6, 0.4, 0.005), EpochRecord(4, 0.5, 0.3, 0.002)])
    assert history.best().epoch == 2
    with pytest.raises(TrainingError):
        TrainingHistory().best()


@pytest.mark.parametrize("kwargs", [
    {"epochs": 0}, {"learning_rate": -1.0}, {"loss_weights": (0.0, 0.0)}, {"optimizer": "rmsprop"},
    {"fg_probability": 1.5},
])
def test_invalid_train_config(kwargs):
    """Test training configuration validation."""
    with pytest.raises(TrainingError):
        TrainConfig(**kwargs).validate()


def test_history_csv_round_trip(tmp_path):
    """Test writing and reading the history CSV."""
    history = TrainingHistory([EpochRecord(1, 0.9, 0.1, 0.01), EpochRecord(2, 0.7, 0.25, 0.005)])
    path = str(tmp_path / "history.csv")
    write_history_csv(history, path)
    assert open(path).readline().strip() == "epoch,train_loss,val_dice,lr"
    assert read_history_csv(path) == history


def _fast_config(**kwargs):
    defaults = dict(epochs=1, batches_per_epoch=1, batch_size=1, patch_size=(16, 16, 16))
    defaults.update(kwargs)
    return TrainConfig(**defaults)


def test_train_smoke(tmp_path, tiny_dataset, tiny_architecture):
    """Test a one-epoch training run."""
    out = str(tmp_path / "run")
    checkpoint, history = train(read_manifest(tiny_dataset), tiny_architecture, _fast_config(), out)
    assert len(history) == 1
    for name in (BEST_CHECKPOINT, LAST_CHECKPOINT, HISTORY_FILE):
        assert os.path.exists(os.path.join(out, name))
    assert checkpoint.epoch == history.best().epoch == 1
    assert 0.0 <= history.records[0].val_dice <= 1.0


def test_train_is_deterministic(tmp_path, tiny_dataset, tiny_architecture):
    """Test that training depends only on its seed."""
    manifest = read_manifest(tiny_dataset)
    architecture = replace(tiny_architecture, placement=Placement.ALL)
    config = _fast_config(epochs=2, optimizer="adamw")
    train(manifest, architecture, config, str(tmp_path / "a"))
    train(manifest, architecture, config, str(tmp_path / "b"))
    a = load_checkpoint(str(tmp_path / "a" / LAST_CHECKPOINT)).model
    b = load_checkpoint(str(tmp_path / "b" / LAST_CHECKPOINT)).model
    for (name, ta), (_, tb) in zip(a.named_parameters(), b.named_parameters()):
        np.testing.assert_array_equal(ta.data, tb.data, err_msg=name)
    history_a = (tmp_path / "a" / HISTORY_FILE).read_bytes()
    assert history_a == (tmp_path / "b" / HISTORY_FILE).read_bytes()


def test_train_on_a_fold(tmp_path, tiny_dataset, tiny_architecture):
    """Test training on one cross-validation fold of the train and val cases."""
    manifest = read_manifest(tiny_dataset)
    checkpoint, history = train(manifest, tiny_architecture, _fast_config(folds=2, fold=1), str(tmp_path / "fold"))
    assert len(history) == 1
    assert checkpoint.epoch == 1
    with pytest.raises(TrainingError):
        train(manifest, tiny_architecture, _fast_config(folds=2, fold=3), str(tmp_path / "bad"))


def test_train_requires_validation_cases(tmp_path, tiny_dataset, tiny_architecture):
    """Test training without validation cases."""
    manifest = read_manifest(tiny_dataset)
    write_manifest(manifest.directory, {case_id: "train" for case_id in manifest.cases})
    with pytest.raises(TrainingError):
        train(read_manifest(tiny_dataset), tiny_architecture, _fast_config(), str(tmp_path / "run"))


def test_train_rejects_non_finite_loss(tmp_path, tiny_dataset, tiny_architecture, monkeypatch):
    """Test that a non-finite loss stops training."""
    import filmseg.train as train_module

    def broken_loss(logits, target, weights):
        return combined_loss(logits, target, weights) * float("nan")

    monkeypatch.setattr(train_module, "combined_loss", broken_loss)
    with pytest.raises(TrainingError) as excinfo:
        train(read_manifest(tiny_dataset), tiny_architecture, _fast_config(), str(tmp_path / "run"))
    assert "epoch 1, batch 0" in str(excinfo.value)


@pytest.mark.slow
def test_training_loss_decreases(tmp_path, tiny_dataset, tiny_architecture):
    """Test that the training loss goes down."""
    config = _fast_config(epochs=8, batches_per_epoch=4, batch_size=2, optimizer="adamw", learning_rate=3e-3)
    _, history = train(read_manifest(tiny_dataset), tiny_architecture, config, str(tmp_path / "run"))
    losses = history.train_losses()
    assert np.median(losses[-3:]) < losses[0]
