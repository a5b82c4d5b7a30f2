"""Independent oracles and toy-model builders shared by the tests."""

from __future__ import annotations

import numpy as np

from diad.config import TrainConfig
from diad.model import init_model, init_thresholds


def entmax15_bisection(x, iters: int = 200) -> np.ndarray:
    """Entmax-1.5 via bisection on the threshold of ``p = max(x/2 - tau, 0)**2``."""
    z = np.asarray(x, dtype=float) / 2.0
    lo, hi = z.max() - 1.0, z.max()
    for _ in range(iters):
        tau = 0.5 * (lo + hi)
        total = (np.clip(z - tau, 0, None) ** 2).sum()
        if total > 1.0:
            lo = tau
        else:
            hi = tau
    return np.clip(z - 0.5 * (lo + hi), 0, None) ** 2


def central_diff(f, x: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. every entry of ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        up = f()
        x[i] = old - eps
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * eps)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-8))


def toy_model(
    n_features: int = 3,
    depth: int = 2,
    n_trees: int = 2,
    n_layers: int = 1,
    extra_dim: int = 1,
    seed: int = 0,
    colsample: float = 1.0,
    random_weights: bool = True,
    X=None,
):
    cfg = TrainConfig(
        n_trees=n_trees, depth=depth, n_layers=n_layers, extra_dim=extra_dim, colsample=colsample, seed=seed
    )
    rng = np.random.default_rng(seed)
    model = init_model(n_features, cfg, rng)
    for layer in model.layers:
        layer.logits[...] = rng.normal(0.0, 1.0, size=layer.logits.shape)
        layer.log_slopes[...] = rng.normal(0.0, 0.3, size=layer.log_slopes.shape)
        if random_weights:
            layer.leaf_weights[...] = rng.uniform(-1, 1, size=layer.leaf_weights.shape)
    if X is None:
        X = rng.uniform(-1, 1, size=(64, n_features))
    init_thresholds(model, X, rng)
    return model


def harden(model):
    model.temperature = model.min_temperature
    return model
