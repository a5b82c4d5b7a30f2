"""Unsupervised training with the partial-identification sparsity objective.

Each step routes a data minibatch and an equally sized batch of uniform
points from ``[-1, 1]^D`` through the ensemble.  Smoothed soft leaf counts
give, per tree, a volume share ``V`` (uniform points) and a data share ``D``
(real rows).  The loss maximises the second moment ``sum V**2 / D`` of the
leaf sparsity ``V / D``; leaf responses track the min-max normalised sparsity
through an exponential moving average that sits outside the gradient tape.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Node
from .config import TrainConfig
from .errors import ContractError, InvalidInputError, ZeroCountError
from .model import ModelState, forward, graph_params, init_model, init_thresholds, predict_scores

logger = logging.getLogger(__name__)

STRUCTURE_PARAMS = ("logits", "thresholds", "log_slopes")


# --- preprocessing --------------------------------------------------------


def minmax_fit(X) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0:
        raise InvalidInputError("minmax_fit needs a non-empty 2-D array")
    return X.min(axis=0), X.max(axis=0)


def minmax_transform(X, stats: tuple[np.ndarray, np.ndarray]) -> np.ndarray:
    """Map the fitted range of each column onto ``[-1, 1]``, clamping unseen values.

    Constant training columns map to 0.
    """
    lo, hi = stats
    X = np.atleast_2d(np.asarray(X, dtype=float))
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    out = 2.0 * (X - lo) / safe - 1.0
    out = np.where(span > 0, out, 0.0)
    return np.clip(out, -1.0, 1.0)


def sample_uniform(batch_size: int, n_features: int, rng: np.random.Generator) -> np.ndarray:
    if batch_size <= 0 or n_features <= 0:
        raise ContractError("batch_size and n_features must be positive")
    return rng.uniform(-1.0, 1.0, size=(batch_size, n_features))


# --- objective ------------------------------------------------------------


@dataclass
class SparsityStats:
    """Per-tree, per-leaf quantities of one update; all arrays are ``(trees, leaves)``."""

    data_counts: np.ndarray
    uniform_counts: np.ndarray
    volume_ratio: np.ndarray
    data_ratio: np.ndarray
    raw_sparsity: np.ndarray
    sparsity: np.ndarray
    moments: np.ndarray
    keep: np.ndarray = field(default_factory=lambda: np.zeros(0))


def normalize_sparsity(raw: np.ndarray) -> np.ndarray:
    """Linearly map each row's min to -1 and max to +1; constant rows become 0."""
    raw = np.asarray(raw, dtype=float)
    lo = raw.min(axis=-1, keepdims=True)
    hi = raw.max(axis=-1, keepdims=True)
    span = hi - lo
    out = 2.0 * (raw - lo) / np.where(span > 0, span, 1.0) - 1.0
    return np.where(span > 0, out, 0.0)


def tree_dropout_mask(n_trees: int, drop_prob: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted per-tree dropout: kept trees are scaled by ``1 / (1 - p)``."""
    if drop_prob <= 0:
        return np.ones(n_trees)
    keep = rng.random(n_trees) >= drop_prob
    return keep / (1.0 - drop_prob)


def pid_loss(
    data_counts: Node | np.ndarray,
    uniform_counts: Node | np.ndarray,
    smoothing: float,
    drop_prob: float = 0.0,
    rng: np.random.Generator | None = None,
    keep: np.ndarray | None = None,
) -> tuple[Node, SparsityStats]:
    """Negative second moment of leaf sparsity, summed over surviving trees.

    ``data_counts`` and ``uniform_counts`` are ``(trees, leaves)``.  A dropout
    mask may be passed directly through ``keep``; otherwise one is drawn from
    ``rng`` with drop probability ``drop_prob``.
    """
    e_data = data_counts if isinstance(data_counts, Node) else ag.const(data_counts)
    e_unif = uniform_counts if isinstance(uniform_counts, Node) else ag.const(uniform_counts)
    if e_data.shape != e_unif.shape or e_data.value.ndim != 2:
        raise ContractError("count arrays must share a (trees, leaves) shape")
    if np.any(e_data.value < 0) or np.any(e_unif.value < 0):
        raise InvalidInputError("leaf counts must be nonnegative")
    e_data = e_data + smoothing
    e_unif = e_unif + smoothing
    if np.any(e_data.value <= 0) or np.any(e_unif.value <= 0):
        raise ZeroCountError("a leaf has zero count; use smoothing > 0")
    volume = e_unif / ag.sum_(e_unif, axis=1, keepdims=True)
    data = e_data / ag.sum_(e_data, axis=1, keepdims=True)
    moments = ag.square(volume) / data
    if keep is None:
        if drop_prob > 0 and rng is None:
            raise ContractError("dropout needs an rng")
        keep = tree_dropout_mask(e_data.shape[0], drop_prob, rng)
    per_tree = ag.sum_(moments, axis=1) * keep
    loss = -ag.sum_(per_tree)
    raw = volume.value / data.value
    stats = SparsityStats(
        data_counts=e_data.value,
        uniform_counts=e_unif.value,
        volume_ratio=volume.value,
        data_ratio=data.value,
        raw_sparsity=raw,
        sparsity=normalize_sparsity(raw),
        moments=moments.value,
        keep=np.asarray(keep),
    )
    return loss, stats


def update_leaf_weights(weights: np.ndarray, sparsity: np.ndarray, gamma: float) -> np.ndarray:
    """Damped update ``(1 - gamma) * w + gamma * s``."""
    if not 0 < gamma <= 1:
        raise ContractError("gamma must lie in (0, 1]")
    return (1.0 - gamma) * np.asarray(weights) + gamma * np.asarray(sparsity)


# --- schedules ------------------------------------------------------------


def temperature_at(step: int, config: TrainConfig) -> float:
    if config.anneal_steps <= 0:
        return config.min_temperature
    frac = min(1.0, step / config.anneal_steps)
    return 1.0 - (1.0 - config.min_temperature) * frac


def lr_at(step: int, config: TrainConfig) -> float:
    if step < config.warmup_steps:
        return config.lr * (step + 1) / config.warmup_steps
    return config.lr


# --- training loop --------------------------------------------------------


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)

    def append(self, **record) -> None:
        self.records.append(record)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.records])

    def __len__(self) -> int:
        return len(self.records)

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec) + "\n")


def _pooled_counts(leaf_probs: list[Node], n_data: int) -> tuple[Node, Node]:
    """Per-tree leaf counts of the first ``n_data`` rows and of the remaining rows."""
    n_rows = leaf_probs[0].shape[1]
    groups = (np.arange(n_rows) >= n_data).astype(int)
    # (2, L, m) per layer -> (2, trees, L)
    both = ag.concat([ag.transpose(ag.group_sum(e, groups, 2, axis=1), (0, 2, 1)) for e in leaf_probs], axis=1)
    return both[0], both[1]


def pid_step_loss(
    model: ModelState,
    X_batch: np.ndarray,
    X_uniform: np.ndarray,
    temperature: float,
    smoothing: float,
    keep: np.ndarray,
    params=None,
) -> tuple[Node, SparsityStats]:
    """Loss of one step for scaled data rows and uniform rows, all layers pooled."""
    params = graph_params(model, STRUCTURE_PARAMS) if params is None else params
    b = len(X_batch)
    res = forward(model, np.vstack([X_batch, X_uniform]), temperature, params=params)
    e_data, e_unif = _pooled_counts(res.leaf_probs, b)
    return pid_loss(e_data, e_unif, smoothing, keep=keep)


def _apply_leaf_update(model: ModelState, stats: SparsityStats, config: TrainConfig) -> None:
    target = stats.sparsity if config.normalize_sparsity else stats.raw_sparsity
    offset = 0
    for layer in model.layers:
        m = layer.n_trees
        w = layer.leaf_weights[:, :, 0]
        layer.leaf_weights[:, :, 0] = update_leaf_weights(w, target[offset : offset + m], config.gamma)
        offset += m


def _initialise(config: TrainConfig, X_train, rng: np.random.Generator) -> tuple[ModelState, np.ndarray]:
    X_train = np.asarray(X_train, dtype=float)
    if X_train.ndim != 2 or len(X_train) == 0:
        raise InvalidInputError("training data must be a non-empty 2-D array")
    stats_mm = minmax_fit(X_train)
    X = minmax_transform(X_train, stats_mm)
    n, d = X.shape
    model = init_model(d, config, rng, *stats_mm)
    init_idx = rng.choice(n, size=config.batch_size, replace=config.batch_size > n)
    init_thresholds(model, X[init_idx], rng)
    return model, X


def fresh_model(config: TrainConfig, X_train, random_responses: bool = False) -> ModelState:
    """An untrained ensemble with min-max statistics and thresholds taken from ``X_train``.

    With ``random_responses`` the score responses are drawn from ``U[-1, 1]``
    instead of starting at zero, which gives a ranking loss a non-zero
    gradient from the first step.
    """
    rng = np.random.default_rng(config.seed)
    model, _ = _initialise(config, X_train, rng)
    if random_responses:
        for layer in model.layers:
            layer.leaf_weights[:, :, 0] = rng.uniform(-1.0, 1.0, size=layer.leaf_weights.shape[:2])
    return model


def score_samples(model: ModelState, X) -> np.ndarray:
    """Anomaly scores for rows in original units (higher is more anomalous)."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise InvalidInputError("X must be 2-D")
    return predict_scores(model, minmax_transform(X, (model.feature_min, model.feature_max)))


def train_unsupervised(
    config: TrainConfig,
    X_train: np.ndarray,
    X_val: np.ndarray | None = None,
    y_val: np.ndarray | None = None,
    log_path: str | Path | None = None,
) -> tuple[ModelState, TrainLog]:
    """Fit the ensemble on unlabeled rows given in original units.

    Returns the trained model (with its min-max statistics) and a per-step log
    of loss, temperature, learning rate and elapsed wall time.  When labeled
    validation rows are supplied the final validation AUC is logged as well.
    """
    rng = np.random.default_rng(config.seed)
    model, X = _initialise(config, X_train, rng)
    n, d = X.shape
    replace = config.batch_size > n
    if replace:
        logger.info("batch size %d exceeds %d rows; sampling with replacement", config.batch_size, n)

    adam = ag.AdamState()
    log = TrainLog()
    start = time.perf_counter()
    for step in range(config.steps):
        temperature = temperature_at(step, config)
        lr = lr_at(step, config)
        idx = rng.choice(n, size=config.batch_size, replace=replace)
        X_unif = sample_uniform(config.batch_size, d, rng)
        keep = tree_dropout_mask(model.n_trees_total, config.tree_dropout, rng)
        params = graph_params(model, STRUCTURE_PARAMS)
        loss, stats = pid_step_loss(model, X[idx], X_unif, temperature, config.smoothing, keep, params)
        ag.backward(loss)
        _apply_leaf_update(model, stats, config)
        arrays, grads = [], []
        for li, layer in enumerate(model.layers):
            arrays += [layer.logits, layer.thresholds, layer.log_slopes]
            grads += [params.logits[li].grad, params.thresholds[li].grad, params.log_slopes[li].grad]
        ag.adam_step(arrays, grads, adam, lr)
        value = float(loss.value)
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite loss at step {step}")
        log.append(
            step=step,
            loss=value,
            temperature=temperature,
            lr=lr,
            wall_time=time.perf_counter() - start,
        )
    model.step = config.steps
    model.temperature = temperature_at(config.steps, config) if config.steps else model.temperature

    if X_val is not None and y_val is not None:
        from .data import auc_metric

        val_auc = auc_metric(score_samples(model, X_val), y_val)
        log.append(step=config.steps, val_auc=float(val_auc))
    if log_path is not None:
        log.write_jsonl(log_path)
    return model, log
