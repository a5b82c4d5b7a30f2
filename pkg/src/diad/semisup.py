"""Fine-tuning a (pre)trained ensemble on a small labeled set.

All parameters, leaf responses and the global bias included, are trained by
gradient at the final temperature.  Minibatches hold equal numbers of
labeled anomalies and normals, re-drawing anomalies when they are scarce.
The checkpoint with the best validation AUC is returned.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Node
from .config import FinetuneConfig, TrainConfig
from .data import auc_metric
from .errors import ContractError, UnusableLabelsError
from .model import ModelState, forward, graph_params
from .pid import fresh_model, minmax_transform, score_samples

logger = logging.getLogger(__name__)

ALL_PARAMS = ("logits", "thresholds", "log_slopes", "leaf_weights", "bias")


def auc_loss(scores_pos: Node, scores_neg: Node) -> Node:
    """Mean pairwise hinge ``max(s_neg - s_pos, 0)`` over all positive/negative pairs."""
    if scores_pos.value.size == 0 or scores_neg.value.size == 0:
        raise ContractError("auc_loss needs at least one positive and one negative score")
    sp = ag.reshape(scores_pos, (-1, 1))
    sn = ag.reshape(scores_neg, (1, -1))
    return ag.mean(ag.relu(sn - sp))


def bce_loss(scores: Node, labels) -> Node:
    """Sigmoid cross-entropy with the scores as logits, averaged over rows."""
    y = np.asarray(labels, dtype=float).reshape(scores.shape)
    if not np.isin(y, (0.0, 1.0)).all():
        raise ContractError("labels must be binary")
    return ag.mean(ag.softplus(scores) - scores * y)


@dataclass
class LabeledBatch:
    X_pos: np.ndarray
    X_neg: np.ndarray

    @property
    def X(self) -> np.ndarray:
        return np.vstack([self.X_pos, self.X_neg])

    @property
    def y(self) -> np.ndarray:
        return np.r_[np.ones(len(self.X_pos)), np.zeros(len(self.X_neg))]


def balanced_batches(
    X: np.ndarray, y: np.ndarray, batch_size: int, rng: np.random.Generator
) -> Iterator[LabeledBatch]:
    """One epoch of batches, each half anomalies and half normals.

    Normals are shuffled and partitioned so that the epoch visits each once.
    Anomalies are drawn by cycling through fresh permutations, so they repeat
    only when there are fewer anomalies than batch slots.
    """
    y = np.asarray(y).astype(int)
    pos = np.flatnonzero(y == 1)
    neg = np.flatnonzero(y == 0)
    if len(pos) == 0:
        raise UnusableLabelsError("no labeled anomalies")
    if len(neg) == 0:
        raise UnusableLabelsError("no labeled normals")
    half = max(1, batch_size // 2)
    neg_order = rng.permutation(neg)
    pos_queue: list[int] = []
    for start in range(0, len(neg_order), half):
        chunk = neg_order[start : start + half]
        while len(pos_queue) < len(chunk):
            pos_queue.extend(rng.permutation(pos).tolist())
        take, pos_queue = pos_queue[: len(chunk)], pos_queue[len(chunk) :]
        yield LabeledBatch(X[np.array(take)], X[chunk])


def _plain_batches(X, y, batch_size, rng) -> Iterator[LabeledBatch]:
    order = rng.permutation(len(y))
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        yield LabeledBatch(X[idx[y[idx] == 1]], X[idx[y[idx] == 0]])


@dataclass
class FinetuneHistory:
    records: list[dict] = field(default_factory=list)
    best_epoch: int = 0

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.records], dtype=float)

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec) + "\n")


def _val_auc(model: ModelState, X_val, y_val) -> float | None:
    if X_val is None or y_val is None or len(y_val) == 0 or len(np.unique(y_val)) < 2:
        return None
    return auc_metric(score_samples(model, X_val), y_val)


def finetune(
    model: ModelState,
    X_train: np.ndarray,
    y_train: np.ndarray,
    X_val: np.ndarray | None,
    y_val: np.ndarray | None,
    config: FinetuneConfig = FinetuneConfig(),
) -> tuple[ModelState, FinetuneHistory]:
    """Fine-tune on labeled rows given in original units.

    Epoch 0 of the history is the incoming model.  Without a usable validation
    set (both classes present) the last epoch is returned.
    """
    history = FinetuneHistory()
    if config.max_epochs == 0:
        return model.copy(), history
    y_train = np.asarray(y_train).astype(int)
    if (y_train == 1).sum() == 0:
        raise UnusableLabelsError("fine-tuning needs at least one labeled anomaly")
    model = model.copy()
    model.temperature = model.min_temperature
    rng = np.random.default_rng(config.seed)
    X = minmax_transform(X_train, (model.feature_min, model.feature_max))

    best_auc = _val_auc(model, X_val, y_val)
    if best_auc is None:
        logger.warning("validation set unusable; returning the final epoch")
    history.records.append({"epoch": 0, "train_loss": None, "val_auc": best_auc})
    best_model = model.copy()
    stale = 0
    adam = ag.AdamState()
    for epoch in range(1, config.max_epochs + 1):
        if config.upsample:
            batches = balanced_batches(X, y_train, config.batch_size, rng)
        else:
            batches = _plain_batches(X, y_train, config.batch_size, rng)
        losses = []
        for batch in batches:
            if config.loss == "auc" and (len(batch.X_pos) == 0 or len(batch.X_neg) == 0):
                continue
            params = graph_params(model, ALL_PARAMS)
            scores = forward(model, batch.X, model.min_temperature, params=params).scores
            n_pos = len(batch.X_pos)
            if config.loss == "auc":
                loss = auc_loss(scores[:n_pos], scores[n_pos:])
            else:
                loss = bce_loss(scores, batch.y)
            ag.backward(loss)
            _apply_adam(model, params, adam, config.lr)
            losses.append(float(loss.value))
        val = _val_auc(model, X_val, y_val)
        history.records.append(
            {"epoch": epoch, "train_loss": float(np.mean(losses)) if losses else None, "val_auc": val}
        )
        if best_auc is None:
            best_model, history.best_epoch = model.copy(), epoch
            continue
        if val is not None and val > best_auc:
            best_auc, best_model, history.best_epoch = val, model.copy(), epoch
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    return best_model, history


def _apply_adam(model: ModelState, params, adam: ag.AdamState, lr: float) -> None:
    arrays, grads = [], []
    for li, layer in enumerate(model.layers):
        arrays += [layer.logits, layer.thresholds, layer.log_slopes, layer.leaf_weights]
        grads += [
            params.logits[li].grad,
            params.thresholds[li].grad,
            params.log_slopes[li].grad,
            params.leaf_weights[li].grad,
        ]
    bias = np.array([model.bias])
    arrays.append(bias)
    grads.append(params.bias.grad.reshape(1))
    ag.adam_step(arrays, grads, adam, lr)
    model.bias = float(bias[0])


def train_from_scratch(
    train_config: TrainConfig,
    X_unlabeled: np.ndarray,
    X_train: np.ndarray,
    y_train: np.ndarray,
    X_val: np.ndarray | None,
    y_val: np.ndarray | None,
    config: FinetuneConfig = FinetuneConfig(),
) -> tuple[ModelState, FinetuneHistory]:
    """Same architecture, no unsupervised stage: fit on the labels alone.

    Thresholds and scaling come from ``X_unlabeled``; score responses start
    random rather than at zero.
    """
    model = fresh_model(train_config, X_unlabeled, random_responses=True)
    return finetune(model, X_train, y_train, X_val, y_val, config)


def select_model(candidates: Sequence[ModelState], X_val, y_val) -> int:
    """Index of the candidate with the highest validation AUC (lowest index on ties)."""
    if not candidates:
        raise ContractError("no candidates")
    aucs = [auc_metric(score_samples(c, X_val), y_val) for c in candidates]
    return int(np.argmax(aucs))


def lr_search(
    fit: Callable[[FinetuneConfig], ModelState],
    config: FinetuneConfig,
    lr_grid: Sequence[float],
    X_val,
    y_val,
) -> tuple[ModelState, float]:
    """Fit once per learning rate and keep the model with the best validation AUC.

    An empty grid fits once with ``config.lr``.
    """
    if not lr_grid:
        return fit(config), config.lr
    candidates = [fit(config.replace(lr=lr)) for lr in lr_grid]
    best = select_model(candidates, X_val, y_val)
    return candidates[best], float(lr_grid[best])
