"""Interpretable anomaly detection with soft oblivious trees in a GA²M ensemble."""

from __future__ import annotations

from .config import FINETUNE_LR_GRID, FinetuneConfig, TrainConfig
from .data import (
    Dataset,
    SplitSpec,
    add_noise_features,
    auc_metric,
    load_csv,
    make_blob_with_outliers,
    make_conflict_task,
    split,
    subsample_labels,
)
from .errors import DiadError
from .explain import explain_sample, explain_samples, extract_interaction, extract_main_effect, fit_baseline
from .io import load_model, save_model
from .model import ModelState, effective_feature_pair, forward, predict_scores
from .pid import score_samples, train_unsupervised
from .semisup import auc_loss, bce_loss, finetune, lr_search, select_model, train_from_scratch

__version__ = "0.1.0"

__all__ = [
    "FINETUNE_LR_GRID",
    "Dataset",
    "DiadError",
    "FinetuneConfig",
    "ModelState",
    "SplitSpec",
    "TrainConfig",
    "add_noise_features",
    "auc_loss",
    "auc_metric",
    "bce_loss",
    "effective_feature_pair",
    "explain_sample",
    "explain_samples",
    "extract_interaction",
    "extract_main_effect",
    "finetune",
    "fit_baseline",
    "forward",
    "load_csv",
    "load_model",
    "lr_search",
    "make_blob_with_outliers",
    "make_conflict_task",
    "predict_scores",
    "save_model",
    "score_samples",
    "select_model",
    "split",
    "subsample_labels",
    "train_from_scratch",
    "train_unsupervised",
]
