"""Hyperparameter containers for unsupervised training and fine-tuning."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .errors import ContractError

FINETUNE_LR_GRID = (5e-3, 2e-3, 1e-3, 5e-4)
FINETUNE_LOSSES = ("auc", "bce")


@dataclass(frozen=True)
class TrainConfig:
    """Unsupervised PID training hyperparameters.

    Defaults are the published unsupervised benchmark settings.
    ``dim_attention`` is stored for completeness but has no effect: trees
    select inputs with plain logits.
    """

    batch_size: int = 2048
    lr: float = 1e-3
    gamma: float = 0.1
    steps: int = 2000
    warmup_steps: int = 1000
    smoothing: float = 50.0
    tree_dropout: float = 0.75
    n_layers: int = 3
    n_trees: int = 300
    extra_dim: int = 1
    depth: int = 4
    dim_attention: int = 12
    colsample: float = 0.4
    anneal_steps: int = 1000
    min_temperature: float = 0.1
    normalize_sparsity: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.smoothing < 0:
            raise ContractError("smoothing must be >= 0")
        if not 0 < self.gamma <= 1:
            raise ContractError("gamma must lie in (0, 1]")
        if not 0 < self.colsample <= 1:
            raise ContractError("colsample must lie in (0, 1]")
        if not 0 <= self.tree_dropout < 1:
            raise ContractError("tree_dropout must lie in [0, 1)")
        if not 0 < self.min_temperature <= 1:
            raise ContractError("min_temperature must lie in (0, 1]")
        for name in ("batch_size", "n_layers", "n_trees", "depth"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")
        for name in ("steps", "warmup_steps", "anneal_steps", "extra_dim"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be >= 0")

    def replace(self, **changes) -> TrainConfig:
        return dataclasses.replace(self, **changes)

    def scaled(self, steps: int) -> TrainConfig:
        """Shrink the step budget, scaling warmup and annealing proportionally."""
        ratio = steps / self.steps if self.steps else 0.0
        return self.replace(
            steps=steps,
            warmup_steps=int(round(self.warmup_steps * ratio)),
            anneal_steps=int(round(self.anneal_steps * ratio)),
        )


@dataclass(frozen=True)
class FinetuneConfig:
    """Labeled fine-tuning settings.  ``lr`` defaults to a value on the search grid."""

    loss: str = "auc"
    lr: float = 1e-3
    max_epochs: int = 200
    patience: int = 10
    batch_size: int = 64
    upsample: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.loss not in FINETUNE_LOSSES:
            raise ContractError(f"loss must be one of {FINETUNE_LOSSES}, got {self.loss!r}")
        if self.lr <= 0:
            raise ContractError("lr must be positive")
        if self.batch_size < 2:
            raise ContractError("batch_size must be >= 2")
        if self.max_epochs < 0 or self.patience < 1:
            raise ContractError("max_epochs must be >= 0 and patience >= 1")

    def replace(self, **changes) -> FinetuneConfig:
        return dataclasses.replace(self, **changes)
