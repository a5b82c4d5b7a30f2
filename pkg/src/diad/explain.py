"""Shape functions, interaction surfaces and per-sample attributions.

After annealing every tree reads at most two raw features, so the score
splits exactly into ``bias + sum_S G_S(x_S)`` where ``G_S`` collects the
(averaged) primary outputs of the trees whose effective feature set is ``S``.
Terms are centred against a reference sample of training rows stored with
the model by :func:`fit_baseline`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, InvalidInputError, NotHardenedError, SchemaError
from .model import ModelState, forward, tree_feature_sets
from .pid import minmax_transform

logger = logging.getLogger(__name__)

MAX_REFERENCE_ROWS = 10_000


def fit_baseline(model: ModelState, X_train, seed: int = 0) -> ModelState:
    """Store the centring reference (rows in original units) on ``model``.

    At most ``MAX_REFERENCE_ROWS`` rows are kept; the observed range always
    comes from all of ``X_train``.
    """
    X = np.asarray(X_train, dtype=float)
    if X.ndim != 2 or X.shape[1] != model.n_features or len(X) == 0:
        raise SchemaError(f"expected a non-empty (n, {model.n_features}) array")
    ref = X
    if len(X) > MAX_REFERENCE_ROWS:
        idx = np.random.default_rng(seed).choice(len(X), MAX_REFERENCE_ROWS, replace=False)
        ref = X[np.sort(idx)]
    model.baseline = {"reference": ref.copy(), "observed_min": X.min(axis=0), "observed_max": X.max(axis=0)}
    return model


def _require(model: ModelState) -> dict:
    if not model.is_hardened:
        raise NotHardenedError(
            f"explanations need a hardened model (temperature {model.temperature} > {model.min_temperature})"
        )
    if model.baseline is None:
        raise ContractError("model has no baseline; call fit_baseline first")
    return model.baseline


def _set_key(pair) -> tuple[int, ...]:
    a, b = int(pair[0]), int(pair[1])
    return (a,) if a == b else (a, b)


def tree_sets(model: ModelState) -> list[tuple[int, ...]]:
    """Effective feature set of every tree, layers concatenated."""
    return [_set_key(p) for sets in tree_feature_sets(model) for p in sets]


def term_values(model: ModelState, X) -> tuple[list[tuple[int, ...]], np.ndarray]:
    """Uncentred terms ``G_S`` for rows in original units.

    Returns the feature sets (sorted) and a ``(rows, sets)`` array whose row
    sums plus the bias equal the hard scores.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != model.n_features:
        raise SchemaError(f"model expects {model.n_features} columns, got {X.shape[1]}")
    keys = tree_sets(model)
    uniq = sorted(set(keys), key=lambda k: (len(k), k))
    col = {k: i for i, k in enumerate(uniq)}
    owner = np.array([col[k] for k in keys], dtype=int)
    Xs = minmax_transform(X, (model.feature_min, model.feature_max))
    res = forward(model, Xs, hard=True)
    per_tree = np.concatenate([o.value[:, :, 0] for o in res.outputs], axis=1) / model.n_trees_total
    terms = np.zeros((len(X), len(uniq)))
    for t in range(per_tree.shape[1]):
        terms[:, owner[t]] += per_tree[:, t]
    return uniq, terms


def _probe(model: ModelState, features: tuple[int, ...], values: np.ndarray) -> np.ndarray:
    """Rows that vary only the given features; the rest sit at the range midpoint."""
    mid = 0.5 * (model.feature_min + model.feature_max)
    X = np.tile(mid, (len(values), 1))
    X[:, list(features)] = values
    return X


def _term(model: ModelState, key: tuple[int, ...], X) -> np.ndarray:
    keys, terms = term_values(model, X)
    if key not in keys:
        return np.zeros(len(X))
    return terms[:, keys.index(key)]


def _nearest(grid: np.ndarray, v: np.ndarray) -> np.ndarray:
    if len(grid) == 1:
        return np.zeros(len(v), dtype=int)
    edges = 0.5 * (grid[1:] + grid[:-1])
    return np.searchsorted(edges, v, side="right")


@dataclass
class ExplanationGraph:
    """Plot-ready shape function (``kind="main"``) or interaction surface (``"interaction"``).

    ``values`` has one entry per grid point (main) or per grid cell
    (interaction, indexed ``[i, j]`` for ``grid[0][i], grid[1][j]``).
    ``density`` counts reference rows nearest to each grid point or cell.
    """

    kind: str
    features: tuple[int, ...]
    grid: list[np.ndarray]
    values: np.ndarray
    density: np.ndarray
    offset: float
    names: list[str] = field(default_factory=list)

    def slope_sum(self) -> float:
        """Sum of consecutive differences of a main-effect curve (its net rise)."""
        if self.kind != "main":
            raise ContractError("slope_sum is defined for main effects")
        return float(np.diff(self.values).sum())

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "features": list(self.features),
            "names": list(self.names),
            "grid": [g.tolist() for g in self.grid],
            "values": self.values.tolist(),
            "density": self.density.tolist(),
            "offset": self.offset,
        }


def _grid(baseline: dict, j: int, size: int) -> np.ndarray:
    lo, hi = float(baseline["observed_min"][j]), float(baseline["observed_max"][j])
    return np.linspace(lo, hi, size) if hi > lo else np.array([lo])


def extract_main_effect(model: ModelState, feature: int, grid_size: int = 101) -> ExplanationGraph:
    """Centred shape function of one feature over its observed range."""
    base = _require(model)
    if not 0 <= feature < model.n_features:
        raise InvalidInputError(f"feature {feature} out of range")
    if grid_size < 1:
        raise InvalidInputError("grid_size must be >= 1")
    key = (feature,)
    ref = base["reference"]
    offset = float(_term(model, key, ref).mean())
    grid = _grid(base, feature, grid_size)
    values = _term(model, key, _probe(model, key, grid[:, None])) - offset
    density = np.bincount(_nearest(grid, ref[:, feature]), minlength=len(grid)).astype(float)
    return ExplanationGraph("main", key, [grid], values, density, offset)


def extract_interaction(
    model: ModelState, features: tuple[int, int], grid_size: int = 32
) -> ExplanationGraph:
    """Pure pairwise surface, double-centred under the marginal grid weights."""
    base = _require(model)
    j, k = (int(f) for f in features)
    if j == k:
        raise InvalidInputError("interaction needs two distinct features")
    if not (0 <= j < model.n_features and 0 <= k < model.n_features):
        raise InvalidInputError(f"features {features} out of range")
    key = (min(j, k), max(j, k))
    ref = base["reference"]
    g0, g1 = _grid(base, j, grid_size), _grid(base, k, grid_size)
    aa, bb = np.meshgrid(g0, g1, indexing="ij")
    raw = _term(model, key, _probe(model, (j, k), np.c_[aa.ravel(), bb.ravel()])).reshape(aa.shape)
    i0, i1 = _nearest(g0, ref[:, j]), _nearest(g1, ref[:, k])
    w0 = np.bincount(i0, minlength=len(g0)) / len(ref)
    w1 = np.bincount(i1, minlength=len(g1)) / len(ref)
    rows = raw @ w1
    cols = w0 @ raw
    grand = float(w0 @ raw @ w1)
    values = raw - rows[:, None] - cols[None, :] + grand
    density = np.zeros((len(g0), len(g1)))
    np.add.at(density, (i0, i1), 1.0)
    return ExplanationGraph("interaction", (j, k), [g0, g1], values, density, grand)


@dataclass
class SampleExplanation:
    sample_id: int
    score: float
    contributions: list[tuple[tuple[int, ...], float]]
    bias: float

    def to_records(self, names: list[str] | None = None) -> list[dict]:
        out = []
        for rank, (fs, value) in enumerate(self.contributions):
            label = [names[f] for f in fs] if names else list(fs)
            out.append({"sample_id": self.sample_id, "rank": rank, "features": label, "contribution": value})
        return out


def explain_samples(
    model: ModelState, X, top_k: int | None = None, sample_ids=None
) -> list[SampleExplanation]:
    """Attribute the hard score of each row of ``X`` to feature sets.

    Each set's contribution is its term at the row minus the term's mean over
    the reference rows; the subtracted means are folded into ``bias`` so
    that ``bias + sum(contributions) == score``.  Exactly-zero contributions
    are omitted.
    """
    base = _require(model)
    if top_k is not None and top_k < 0:
        raise InvalidInputError("top_k must be >= 0")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    keys, terms = term_values(model, X)
    _, ref_terms = term_values(model, base["reference"])
    offsets = ref_terms.mean(axis=0)
    bias = float(model.bias + offsets.sum())
    ids = range(len(X)) if sample_ids is None else sample_ids
    out = []
    for sid, row in zip(ids, terms):
        pairs = [(k, float(c)) for k, c in zip(keys, row - offsets) if c != 0.0]
        pairs.sort(key=lambda kc: -kc[1])
        out.append(SampleExplanation(int(sid), float(model.bias + row.sum()), pairs[:top_k], bias))
    return out


def explain_sample(model: ModelState, x, top_k: int | None = None, sample_id: int = 0) -> SampleExplanation:
    """Attribution of a single row; see :func:`explain_samples`."""
    return explain_samples(model, np.asarray(x, dtype=float).reshape(1, -1), top_k, [sample_id])[0]
