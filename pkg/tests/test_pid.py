import json

import numpy as np
import pytest

from diad import autograd as ag
from diad.config import TrainConfig
from diad.data import make_blob_with_outliers
from diad.errors import ContractError, InvalidInputError, ZeroCountError
from diad.model import forward, graph_params
from diad.pid import (
    STRUCTURE_PARAMS,
    _pooled_counts,
    lr_at,
    minmax_fit,
    minmax_transform,
    normalize_sparsity,
    pid_loss,
    pid_step_loss,
    sample_uniform,
    score_samples,
    temperature_at,
    train_unsupervised,
    tree_dropout_mask,
    update_leaf_weights,
)

from helpers import central_diff, harden, rel_err, toy_model

TINY = TrainConfig(steps=12, warmup_steps=4, anneal_steps=8, n_trees=3, n_layers=2, depth=3, batch_size=32)


# --- preprocessing --------------------------------------------------------


def test_minmax_examples():
    X = np.array([[0.0, 7.0], [5.0, 7.0], [10.0, 7.0]])
    stats = minmax_fit(X)
    np.testing.assert_allclose(minmax_transform(X, stats), [[-1, 0], [0, 0], [1, 0]])
    np.testing.assert_allclose(minmax_transform([[12.0, 7.0]], stats), [[1.0, 0.0]])


def test_minmax_empty():
    with pytest.raises(InvalidInputError):
        minmax_fit(np.zeros((0, 3)))


def test_sample_uniform():
    U = sample_uniform(100_000, 2, np.random.default_rng(0))
    assert U.min() >= -1 and U.max() <= 1
    assert np.all(np.abs(U.mean(axis=0)) < 0.02)
    np.testing.assert_array_equal(sample_uniform(5, 3, np.random.default_rng(4)), sample_uniform(5, 3, np.random.default_rng(4)))
    with pytest.raises(ContractError):
        sample_uniform(0, 3, np.random.default_rng(0))


# --- objective ------------------------------------------------------------


def test_pid_loss_uniform_sparsity():
    loss, stats = pid_loss(np.array([[1.0, 1.0]]), np.array([[1.0, 1.0]]), smoothing=0.0)
    assert abs(-float(loss.value) - 1.0) < 1e-12
    np.testing.assert_allclose(stats.sparsity, 0.0)


def test_pid_loss_hand_arithmetic():
    loss, stats = pid_loss(np.array([[1.0, 9.0]]), np.array([[9.0, 1.0]]), smoothing=0.0)
    np.testing.assert_allclose(stats.volume_ratio, [[0.9, 0.1]])
    np.testing.assert_allclose(stats.data_ratio, [[0.1, 0.9]])
    assert abs(-float(loss.value) - (0.81 / 0.1 + 0.01 / 0.9)) < 1e-9


def test_pid_loss_ratios_sum_to_one():
    rng = np.random.default_rng(0)
    _, stats = pid_loss(rng.random((5, 16)) * 30, rng.random((5, 16)) * 30, smoothing=50.0)
    np.testing.assert_allclose(stats.volume_ratio.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(stats.data_ratio.sum(axis=1), 1.0, atol=1e-12)
    assert stats.sparsity.min() == -1.0 and stats.sparsity.max() == 1.0


def test_pid_loss_zero_count_guard():
    with pytest.raises(ZeroCountError):
        pid_loss(np.array([[0.0, 3.0]]), np.array([[1.0, 1.0]]), smoothing=0.0)


def test_inverted_dropout_is_unbiased():
    rng = np.random.default_rng(0)
    data, unif = rng.random((6, 8)) * 20, rng.random((6, 8)) * 20
    full = float(pid_loss(data, unif, 5.0)[0].value)
    draws = [float(pid_loss(data, unif, 5.0, drop_prob=0.75, rng=rng)[0].value) for _ in range(10_000)]
    assert abs(np.mean(draws) / full - 1) < 0.02


def test_dropout_mask_values():
    keep = tree_dropout_mask(1000, 0.75, np.random.default_rng(0))
    assert set(np.unique(keep)) <= {0.0, 4.0}
    np.testing.assert_array_equal(tree_dropout_mask(3, 0.0, np.random.default_rng(0)), np.ones(3))


def test_normalized_sparsity_examples():
    np.testing.assert_allclose(normalize_sparsity(np.array([1.0, 3.0, 5.0])), [-1.0, 0.0, 1.0])
    np.testing.assert_array_equal(normalize_sparsity(np.array([[2.0, 2.0, 2.0]])), [[0.0, 0.0, 0.0]])


def test_leaf_update_examples():
    assert update_leaf_weights(np.array(0.0), np.array(1.0), 0.1) == pytest.approx(0.1)
    w, s = np.array([0.8, -0.3]), np.array([-0.2, 0.5])
    w0 = w.copy()
    for i in range(1, 30):
        w = update_leaf_weights(w, s, 0.1)
        np.testing.assert_allclose(np.abs(w - s), 0.9**i * np.abs(w0 - s), atol=1e-12)
    with pytest.raises(ContractError):
        update_leaf_weights(w, s, 0.0)


def test_data_weighted_sparsity_identity_hard_counts():
    # heads on different features: every leaf of a depth-2 tree is a quadrant and gets data
    m = harden(toy_model(n_features=2, depth=2, n_trees=3, n_layers=1))
    layer = m.layers[0]
    layer.logits[...] = 0.0
    layer.logits[:, 0, 0] = 5.0
    layer.logits[:, 1, 1] = 5.0
    rng = np.random.default_rng(1)
    layer.thresholds[...] = rng.uniform(-0.5, 0.5, size=layer.thresholds.shape)
    X, U = rng.normal(0, 0.5, (400, 2)), rng.uniform(-1, 1, (400, 2))
    res = forward(m, np.vstack([X, U]), hard=True)
    data, unif = _pooled_counts(res.leaf_probs, 400)
    assert np.all(data.value == np.round(data.value)) and np.all(data.value > 0)
    _, stats = pid_loss(data.value, unif.value, smoothing=0.0)
    np.testing.assert_allclose((stats.data_ratio * stats.raw_sparsity).sum(axis=1), 1.0, atol=1e-6)


def test_pid_threshold_gradient_matches_finite_differences():
    m = toy_model(n_features=3, depth=2, n_trees=2, n_layers=1)
    rng = np.random.default_rng(2)
    X, U = rng.uniform(-1, 1, (8, 3)), rng.uniform(-1, 1, (8, 3))
    keep = np.ones(2)
    params = graph_params(m, STRUCTURE_PARAMS)
    loss, _ = pid_step_loss(m, X, U, 0.5, 1.0, keep, params)
    ag.backward(loss)

    def f():
        return float(pid_step_loss(m, X, U, 0.5, 1.0, keep)[0].value)

    assert rel_err(params.thresholds[0].grad, central_diff(f, m.layers[0].thresholds)) < 1e-3


# --- schedules and loop ---------------------------------------------------


def test_schedules():
    cfg = TrainConfig()
    temps = [temperature_at(s, cfg) for s in range(0, 2000, 7)]
    assert temps[0] == 1.0 and temperature_at(1000, cfg) == pytest.approx(0.1)
    assert all(a >= b for a, b in zip(temps, temps[1:]))
    lrs = [lr_at(s, cfg) for s in range(2000)]
    assert all(a <= b for a, b in zip(lrs[:1000], lrs[1:1000]))
    assert lrs[999] == pytest.approx(1e-3) and set(lrs[1000:]) == {1e-3}


def test_zero_steps_returns_initial_model():
    X = make_blob_with_outliers(200, seed=0).X
    m, log = train_unsupervised(TINY.replace(steps=0), X)
    assert len(log) == 0 and m.temperature == 1.0
    np.testing.assert_array_equal(m.layers[0].leaf_weights[:, :, 0], 0.0)


def test_training_log_and_determinism(tmp_path):
    X = make_blob_with_outliers(300, seed=1).X
    m1, log1 = train_unsupervised(TINY, X, log_path=tmp_path / "log.jsonl")
    m2, log2 = train_unsupervised(TINY, X)
    assert len(log1) == TINY.steps
    assert np.all(np.isfinite(log1.column("loss")))
    np.testing.assert_array_equal(log1.column("loss"), log2.column("loss"))
    np.testing.assert_array_equal(score_samples(m1, X), score_samples(m2, X))
    lines = (tmp_path / "log.jsonl").read_text().splitlines()
    assert len(lines) == TINY.steps
    assert set(json.loads(lines[0])) == {"step", "loss", "temperature", "lr", "wall_time"}
    assert m1.is_hardened


def test_small_dataset_samples_with_replacement():
    X = np.random.default_rng(0).normal(size=(10, 2))
    m, log = train_unsupervised(TINY.replace(batch_size=64), X)
    assert np.all(np.isfinite(log.column("loss")))


def test_single_row_dataset():
    m, log = train_unsupervised(TINY, np.array([[1.0, 2.0, 3.0]]))
    assert np.all(np.isfinite(log.column("loss")))


def test_outliers_score_higher_on_blob():
    ds = make_blob_with_outliers(2000, seed=3)
    cfg = TrainConfig(seed=3).scaled(150).replace(n_trees=16, batch_size=256, n_layers=2)
    m, log = train_unsupervised(cfg, ds.X, ds.X, ds.y)
    s = score_samples(m, ds.X)
    assert s[ds.y == 1].mean() > s[ds.y == 0].mean()
    assert "val_auc" in log.records[-1]
