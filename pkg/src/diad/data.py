"""Dataset ingestion, splitting, label budgets, noise augmentation and AUC."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .errors import (
    ContractError,
    InsufficientPositivesError,
    MissingFileError,
    NonNumericCellError,
    UndefinedMetricError,
    UnknownColumnError,
)

logger = logging.getLogger(__name__)

DEFAULT_FRACTIONS = (0.64, 0.16, 0.20)
LABEL_BUDGETS = (5, 15, 30, 60, 120)


@dataclass
class Dataset:
    X: np.ndarray
    columns: list[str]
    y: np.ndarray | None = None
    provenance: str = ""
    dropped_rows: int = 0

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        if self.y is not None:
            self.y = np.asarray(self.y).astype(int)
            if not np.isin(self.y, (0, 1)).all():
                raise ContractError("labels must be 0 or 1")
            if len(self.y) != len(self.X):
                raise ContractError("labels and features differ in length")

    def __len__(self) -> int:
        return len(self.X)

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    @property
    def has_labels(self) -> bool:
        return self.y is not None

    def subset(self, idx: np.ndarray) -> Dataset:
        return replace(self, X=self.X[idx], y=None if self.y is None else self.y[idx], dropped_rows=0)


def load_csv(path: str | Path, label_column: str | None = None) -> Dataset:
    """Read a numeric CSV with a header row.

    Rows containing NaN or infinite cells are dropped and counted in
    ``Dataset.dropped_rows``.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise NonNumericCellError(f"{path} is empty") from None
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rows.append([float(cell) for cell in row])
            except ValueError:
                raise NonNumericCellError(f"{path}:{lineno}: non-numeric cell in {row!r}") from None
            if len(row) != len(header):
                raise NonNumericCellError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
    data = np.array(rows, dtype=float).reshape(-1, len(header))
    label_idx = None
    if label_column is not None:
        if label_column not in header:
            raise UnknownColumnError(f"label column {label_column!r} not in {header}")
        label_idx = header.index(label_column)
    finite = np.isfinite(data).all(axis=1)
    dropped = int((~finite).sum())
    if dropped:
        logger.warning("%s: dropped %d rows with non-finite cells", path, dropped)
    data = data[finite]
    if label_idx is None:
        return Dataset(data, header, None, str(path), dropped)
    feat = [i for i in range(len(header)) if i != label_idx]
    return Dataset(data[:, feat], [header[i] for i in feat], data[:, label_idx], str(path), dropped)


def save_csv(path: str | Path, dataset: Dataset, label_column: str = "label") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        cols = list(dataset.columns) + ([label_column] if dataset.has_labels else [])
        w.writerow(cols)
        for i, row in enumerate(dataset.X):
            vals = [repr(float(v)) for v in row]
            if dataset.has_labels:
                vals.append(str(int(dataset.y[i])))
            w.writerow(vals)


@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple[float, float, float] = DEFAULT_FRACTIONS
    seed: int = 0
    n_anomalies: int = 0

    def __post_init__(self):
        if abs(sum(self.fractions) - 1.0) > 1e-9 or min(self.fractions) < 0:
            raise ContractError("split fractions must be nonnegative and sum to 1")


def _split_counts(n: int, fractions) -> tuple[int, int, int]:
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    n_train = min(n_train, n)
    n_val = min(n_val, n - n_train)
    return n_train, n_val, n - n_train - n_val


def split_indices(n: int, y: np.ndarray | None, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rng = np.random.default_rng(spec.seed)
    if y is None or y.sum() < 3 or (len(y) - y.sum()) < 3:
        if y is not None:
            logger.warning("too few anomalies to stratify; using an unstratified split")
        perm = rng.permutation(n)
        a, b, _ = _split_counts(n, spec.fractions)
        return np.sort(perm[:a]), np.sort(perm[a : a + b]), np.sort(perm[a + b :])
    parts: list[list[np.ndarray]] = [[], [], []]
    n_train, n_val, _ = _split_counts(n, spec.fractions)
    pos = rng.permutation(np.flatnonzero(y == 1))
    neg = rng.permutation(np.flatnonzero(y == 0))
    p_train, p_val, _ = _split_counts(len(pos), spec.fractions)
    cuts_pos = (p_train, p_train + p_val)
    cuts_neg = (n_train - p_train, n_train - p_train + n_val - p_val)
    for group, cuts in ((pos, cuts_pos), (neg, cuts_neg)):
        lo, hi = max(0, min(cuts[0], len(group))), max(0, min(cuts[1], len(group)))
        parts[0].append(group[:lo])
        parts[1].append(group[lo:hi])
        parts[2].append(group[hi:])
    return tuple(np.sort(np.concatenate(p)) for p in parts)


def split(dataset: Dataset, spec: SplitSpec = SplitSpec()) -> tuple[Dataset, Dataset, Dataset]:
    """Train/validation/test split, stratified by label when labels exist."""
    idx = split_indices(len(dataset), dataset.y, spec)
    return tuple(dataset.subset(i) for i in idx)


def subsample_labels(train: Dataset, n_anomalies: int, seed: int) -> tuple[Dataset, Dataset]:
    """Label ``n_anomalies`` positives plus enough negatives to keep the anomaly ratio.

    Returns ``(labeled, unlabeled)``; the unlabeled part carries no labels.
    """
    if train.y is None:
        raise ContractError("training split has no labels")
    pos = np.flatnonzero(train.y == 1)
    neg = np.flatnonzero(train.y == 0)
    if n_anomalies > len(pos):
        raise InsufficientPositivesError(
            f"requested {n_anomalies} labeled anomalies but train has {len(pos)} (short by {n_anomalies - len(pos)})"
        )
    if n_anomalies == 0:
        return train.subset(np.array([], dtype=int)), replace(train.subset(np.arange(len(train))), y=None)
    ratio = len(pos) / len(train.y)
    n_neg = min(len(neg), int(math.floor(n_anomalies * (1.0 - ratio) / ratio + 1e-9)))
    rng = np.random.default_rng(seed)
    chosen = np.concatenate([rng.choice(pos, n_anomalies, replace=False), rng.choice(neg, n_neg, replace=False)])
    chosen = np.sort(chosen)
    rest = np.setdiff1d(np.arange(len(train)), chosen)
    return train.subset(chosen), replace(train.subset(rest), y=None)


def add_noise_features(dataset: Dataset, k: int, seed: int) -> Dataset:
    """Append ``k`` i.i.d. ``U[-1, 1]`` columns."""
    if k < 0:
        raise ContractError("k must be >= 0")
    if k == 0:
        return dataset
    rng = np.random.default_rng(seed)
    noise = rng.uniform(-1.0, 1.0, size=(len(dataset), k))
    return replace(
        dataset,
        X=np.concatenate([dataset.X, noise], axis=1),
        columns=list(dataset.columns) + [f"noise_{i}" for i in range(k)],
    )


def auc_metric(scores, labels) -> float:
    """ROC AUC via the Mann-Whitney rank statistic; tied scores count one half."""
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels).astype(int).ravel()
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both classes")
    ranks = rankdata(scores)
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


# --- synthetic tasks ------------------------------------------------------


def make_blob_with_outliers(
    n: int = 2000, outlier_frac: float = 0.05, seed: int = 0, scale: float = 1.0, box: float = 6.0
) -> Dataset:
    """Dense 2-D Gaussian inliers plus uniform outliers over a wide box."""
    rng = np.random.default_rng(seed)
    n_out = int(round(n * outlier_frac))
    inl = rng.normal(0.0, scale, size=(n - n_out, 2))
    out = rng.uniform(-box, box, size=(n_out, 2))
    X = np.vstack([inl, out])
    y = np.r_[np.zeros(n - n_out, int), np.ones(n_out, int)]
    perm = rng.permutation(n)
    return Dataset(X[perm], ["x0", "x1"], y[perm], provenance=f"blob(seed={seed})")


def make_conflict_task(
    n: int = 3000, outlier_frac: float = 0.05, seed: int = 0, rare_rate: float = 0.25, box: float = 5.0
) -> Dataset:
    """A task whose labels only partly agree with density.

    Inliers are a 2-D Gaussian blob (``x0, x1``) with a binary flag ``x2``
    set at rate ``rare_rate``; the flag's rare value looks anomalous to a
    density model.  Labeled anomalies are uniform over a wide box in
    ``(x0, x1)`` and never carry the flag, so the label notion inverts the
    density notion on ``x2``.  A fourth column is independent noise.
    """
    rng = np.random.default_rng(seed)
    n_out = int(round(n * outlier_frac))
    n_in = n - n_out
    inl = np.c_[rng.normal(size=(n_in, 2)), rng.random(n_in) < rare_rate, rng.normal(size=n_in)]
    out = np.c_[rng.uniform(-box, box, size=(n_out, 2)), np.zeros(n_out), rng.normal(size=n_out)]
    X = np.vstack([inl, out]).astype(float)
    y = np.r_[np.zeros(n_in, int), np.ones(n_out, int)]
    perm = rng.permutation(n)
    return Dataset(X[perm], ["x0", "x1", "flag", "x3"], y[perm], provenance=f"conflict(seed={seed})")
