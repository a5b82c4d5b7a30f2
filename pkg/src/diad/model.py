"""Soft oblivious decision trees stacked into a GA²M-constrained ensemble.

Every tree owns two selection-logit vectors.  Depths 1, 3, 5, ... split on
the input chosen by the first vector and depths 2, 4, ... on the input chosen
by the second, so a tree reads at most two candidates.  Candidates of layer
``l`` are the raw features followed by every output of the trees in layers
``< l``.  The second head is restricted to candidates whose raw-feature set,
merged with that of the first head's current choice, has at most two
elements; once temperatures are annealed each tree therefore depends on at
most two raw features.

Parameters are stored per layer as arrays stacked over trees so that a
forward pass is a handful of batched numpy operations.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Node
from .config import TrainConfig
from .errors import ContractError, NotHardenedError, SchemaError

LOGIT_INIT_STD = 0.01
_HARD_TOL = 1e-12


@dataclass
class Layer:
    """Parameters of the ``m`` trees of one layer.

    Shapes: ``logits (m, 2, K)``, ``thresholds (m, C)``, ``log_slopes (m, C)``,
    ``leaf_weights (m, 2**C, 1 + extra_dim)``, ``column_mask (m, K)``.
    Column 0 of the leaf weights is the score response; extra columns only
    feed later layers.
    """

    logits: np.ndarray
    thresholds: np.ndarray
    log_slopes: np.ndarray
    leaf_weights: np.ndarray
    column_mask: np.ndarray

    @property
    def n_trees(self) -> int:
        return self.logits.shape[0]

    @property
    def n_candidates(self) -> int:
        return self.logits.shape[2]

    @property
    def slopes(self) -> np.ndarray:
        return np.exp(self.log_slopes)

    @property
    def out_dim(self) -> int:
        return self.leaf_weights.shape[2]


@dataclass
class TreeParameters:
    """Read-only snapshot of a single tree."""

    selection_logits: np.ndarray
    thresholds: np.ndarray
    slopes: np.ndarray
    leaf_weights: np.ndarray
    column_mask: np.ndarray

    @property
    def depth(self) -> int:
        return self.thresholds.shape[0]


@dataclass
class LayerWiring:
    """Candidate inputs of a layer and the raw features each one depends on.

    ``feature_sets[k]`` is a pair ``(a, b)`` with ``a <= b``; a singleton set
    is encoded as ``(a, a)``.
    """

    layer: int
    n_features: int
    feature_sets: np.ndarray
    sources: list[tuple[str, int, int]]

    @property
    def n_candidates(self) -> int:
        return len(self.feature_sets)


@dataclass
class ModelState:
    n_features: int
    depth: int
    layers: list[Layer]
    feature_min: np.ndarray
    feature_max: np.ndarray
    temperature: float = 1.0
    min_temperature: float = 0.1
    step: int = 0
    bias: float = 0.0
    config: dict = field(default_factory=dict)
    # filled by diad.explain.fit_baseline
    baseline: dict | None = None

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def n_trees_total(self) -> int:
        return sum(layer.n_trees for layer in self.layers)

    @property
    def is_hardened(self) -> bool:
        return self.temperature <= self.min_temperature + _HARD_TOL

    def tree(self, layer: int, index: int) -> TreeParameters:
        lay = self.layers[layer]
        return TreeParameters(
            selection_logits=lay.logits[index].copy(),
            thresholds=lay.thresholds[index].copy(),
            slopes=lay.slopes[index].copy(),
            leaf_weights=lay.leaf_weights[index].copy(),
            column_mask=lay.column_mask[index].copy(),
        )

    def copy(self) -> ModelState:
        return ModelState(
            n_features=self.n_features,
            depth=self.depth,
            layers=[
                Layer(
                    l.logits.copy(),
                    l.thresholds.copy(),
                    l.log_slopes.copy(),
                    l.leaf_weights.copy(),
                    l.column_mask.copy(),
                )
                for l in self.layers
            ],
            feature_min=self.feature_min.copy(),
            feature_max=self.feature_max.copy(),
            temperature=self.temperature,
            min_temperature=self.min_temperature,
            step=self.step,
            bias=self.bias,
            config=dict(self.config),
            baseline=None if self.baseline is None else dict(self.baseline),
        )


def head_of_depth(depth: int) -> np.ndarray:
    """Selection head used at each depth: 0, 1, 0, 1, ..."""
    return np.arange(depth) % 2


def n_keep_columns(n_features: int, colsample: float) -> int:
    return max(1, int(np.floor(colsample * n_features + 0.5)))


def init_model(
    n_features: int,
    config: TrainConfig,
    rng: np.random.Generator,
    feature_min: np.ndarray | None = None,
    feature_max: np.ndarray | None = None,
) -> ModelState:
    """Random initial parameters; thresholds are zero until :func:`init_thresholds`."""
    if n_features < 1:
        raise ContractError("need at least one feature")
    m, c, out_dim = config.n_trees, config.depth, 1 + config.extra_dim
    keep = n_keep_columns(n_features, config.colsample)
    layers = []
    n_cand = n_features
    for _ in range(config.n_layers):
        column_mask = np.ones((m, n_cand), dtype=bool)
        column_mask[:, :n_features] = False
        for t in range(m):
            column_mask[t, rng.choice(n_features, size=keep, replace=False)] = True
        leaf_weights = np.zeros((m, 2**c, out_dim))
        leaf_weights[:, :, 1:] = rng.uniform(-1.0, 1.0, size=(m, 2**c, out_dim - 1))
        layers.append(
            Layer(
                logits=rng.normal(0.0, LOGIT_INIT_STD, size=(m, 2, n_cand)),
                thresholds=np.zeros((m, c)),
                log_slopes=np.zeros((m, c)),
                leaf_weights=leaf_weights,
                column_mask=column_mask,
            )
        )
        n_cand += m * out_dim
    return ModelState(
        n_features=n_features,
        depth=c,
        layers=layers,
        feature_min=np.full(n_features, -1.0) if feature_min is None else np.asarray(feature_min, float),
        feature_max=np.full(n_features, 1.0) if feature_max is None else np.asarray(feature_max, float),
        min_temperature=config.min_temperature,
        config=_config_dict(config),
    )


def _config_dict(config: TrainConfig) -> dict:
    return asdict(config)


# --- wiring ---------------------------------------------------------------


def _union_pairs(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cardinality and (min, max) of the union of two pair-encoded sets."""
    allv = np.concatenate(np.broadcast_arrays(a, b), axis=-1)
    srt = np.sort(allv, axis=-1)
    card = 1 + (np.diff(srt, axis=-1) > 0).sum(axis=-1)
    return card, np.stack([srt[..., 0], srt[..., -1]], axis=-1)


def compatibility_mask(feature_sets: np.ndarray, head1_choice: np.ndarray) -> np.ndarray:
    """Candidates the second head may use given the first head's choice.

    ``feature_sets`` is ``(K, 2)``; ``head1_choice`` holds one candidate index
    per tree.  Returns a ``(m, K)`` boolean mask: candidate ``k`` is allowed
    when the union of its raw features with those of the first head's choice
    has at most two elements.
    """
    chosen = feature_sets[np.asarray(head1_choice)]  # (m, 2)
    card, _ = _union_pairs(chosen[:, None, :], feature_sets[None, :, :])
    return card <= 2


def _masked_argmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    # np.argmax returns the lowest index among ties
    return np.argmax(np.where(mask, logits, -np.inf), axis=-1)


@dataclass
class _LayerSelection:
    masks: np.ndarray  # (m, 2, K)
    choice: np.ndarray  # (m, 2) argmax candidate per head
    tree_sets: np.ndarray  # (m, 2) effective raw-feature pair per tree


def _select_layer(layer: Layer, feature_sets: np.ndarray, logits: np.ndarray | None = None) -> _LayerSelection:
    logits = layer.logits if logits is None else logits
    mask1 = layer.column_mask
    a1 = _masked_argmax(logits[:, 0], mask1)
    mask2 = mask1 & compatibility_mask(feature_sets, a1)
    a2 = _masked_argmax(logits[:, 1], mask2)
    _, tree_sets = _union_pairs(feature_sets[a1], feature_sets[a2])
    return _LayerSelection(np.stack([mask1, mask2], axis=1), np.stack([a1, a2], axis=1), tree_sets)


def layer_wirings(model: ModelState) -> list[LayerWiring]:
    """Wiring of every layer under the current argmax selections."""
    d = model.n_features
    sets = np.stack([np.arange(d), np.arange(d)], axis=1)
    sources: list[tuple[str, int, int]] = [("feature", j, 0) for j in range(d)]
    wirings = []
    for li, layer in enumerate(model.layers):
        wirings.append(LayerWiring(li, d, sets.copy(), list(sources)))
        sel = _select_layer(layer, sets)
        sets = np.concatenate([sets, np.repeat(sel.tree_sets, layer.out_dim, axis=0)], axis=0)
        sources += [("tree", li, t) for t in range(layer.n_trees) for _ in range(layer.out_dim)]
    return wirings


def tree_feature_sets(model: ModelState) -> list[np.ndarray]:
    """Per layer, the ``(m, 2)`` pair of raw features each tree depends on."""
    out = []
    for wiring, layer in zip(layer_wirings(model), model.layers):
        out.append(_select_layer(layer, wiring.feature_sets).tree_sets)
    return out


def effective_feature_pair(model: ModelState, layer: int, tree: int) -> frozenset[int]:
    """Raw features a hardened tree reads, after resolving residual inputs."""
    if not model.is_hardened:
        raise NotHardenedError(
            f"temperature {model.temperature} has not reached {model.min_temperature}"
        )
    pair = tree_feature_sets(model)[layer][tree]
    return frozenset(int(v) for v in pair)


# --- forward --------------------------------------------------------------


@dataclass
class GraphParams:
    """Per-layer graph nodes for the parameters of a forward pass."""

    logits: list[Node]
    thresholds: list[Node]
    log_slopes: list[Node]
    leaf_weights: list[Node]
    bias: Node

    def trainable(self) -> list[Node]:
        nodes = self.logits + self.thresholds + self.log_slopes + self.leaf_weights + [self.bias]
        return [n for n in nodes if n.op == "param"]


def graph_params(model: ModelState, trainable: tuple[str, ...] = ()) -> GraphParams:
    """Wrap model arrays as graph nodes; names in ``trainable`` become parameters."""

    def wrap(name, arrays):
        maker = ag.param if name in trainable else ag.const
        return [maker(a) for a in arrays]

    return GraphParams(
        logits=wrap("logits", [l.logits for l in model.layers]),
        thresholds=wrap("thresholds", [l.thresholds for l in model.layers]),
        log_slopes=wrap("log_slopes", [l.log_slopes for l in model.layers]),
        leaf_weights=wrap("leaf_weights", [l.leaf_weights for l in model.layers]),
        bias=(ag.param if "bias" in trainable else ag.const)(np.array(model.bias)),
    )


def select_inputs(
    inputs: Node, logits: Node, masks: np.ndarray, temperature: float, hard: bool = False
) -> Node:
    """Per-head, per-tree convex combinations of the candidate inputs.

    ``inputs`` is ``(B, K)`` and ``logits`` ``(m, 2, K)``; returns ``(2, B, m)``.
    """
    if inputs.shape[1] != logits.shape[2]:
        raise ContractError(
            f"layer has {logits.shape[2]} candidates but input has {inputs.shape[1]} columns"
        )
    if hard:
        choice = _masked_argmax(logits.value, masks)
        weights = ag.const(np.eye(logits.shape[2])[choice])
    else:
        weights = ag.entmax(logits, temperature, masks)
    return ag.einsum("bk,mhk->hbm", inputs, weights)


def split_probabilities(
    selected: Node, thresholds: Node, log_slopes: Node, temperature: float, hard: bool = False
) -> Node:
    """Probability of the ``>= threshold`` branch at every depth, shape ``(C, B, m)``.

    ``selected`` is the ``(2, B, m)`` output of :func:`select_inputs`;
    ``thresholds`` and ``log_slopes`` are ``(m, C)``.
    """
    depth = thresholds.shape[1]
    g = ag.take(selected, head_of_depth(depth), axis=0)
    b = ag.reshape(ag.transpose(thresholds, (1, 0)), (depth, 1, -1))
    if hard:
        return ag.const((g.value - b.value >= 0).astype(float))
    s = ag.reshape(ag.transpose(ag.exp(log_slopes), (1, 0)), (depth, 1, -1))
    return ag.entmoid((g - b) / (s * temperature))


def leaf_assignment(split_probs: Node) -> Node:
    """Soft one-of-``2**C`` leaf membership from per-depth branch probabilities.

    Input ``(C, ...)``, output ``(2**C, ...)``.  Leaf index bits run from the
    first depth (most significant) to the last; a 0 bit means the
    ``>= threshold`` branch was taken.
    """
    depth = split_probs.shape[0]
    e = ag.const(np.ones((1,) + split_probs.shape[1:]))
    for c in reversed(range(depth)):
        e = ag.branch_split(e, split_probs[c])
    return e


def tree_output(leaf_probs: Node, leaf_weights: Node) -> Node:
    """``(2**C, B, m) x (m, 2**C, O) -> (B, m, O)``."""
    return ag.leaf_response(leaf_probs, leaf_weights)


@dataclass
class ForwardResult:
    """Scores plus per-layer intermediates.

    ``leaf_probs[l]`` is laid out ``(2**C, B, m)``; ``outputs[l]`` is
    ``(B, m, O)``.
    """

    scores: Node
    leaf_probs: list[Node]
    outputs: list[Node]
    selections: list[_LayerSelection]

    def leaf_assignments(self, layer: int) -> np.ndarray:
        """Leaf memberships of one layer as a ``(B, m, 2**C)`` array."""
        return np.transpose(self.leaf_probs[layer].value, (1, 2, 0))


def forward(
    model: ModelState,
    X: np.ndarray | Node,
    temperature: float | None = None,
    hard: bool = False,
    params: GraphParams | None = None,
) -> ForwardResult:
    """Anomaly scores for rows already scaled to ``[-1, 1]``; higher is more anomalous."""
    X = X if isinstance(X, Node) else ag.const(np.atleast_2d(np.asarray(X, dtype=float)))
    if X.shape[1] != model.n_features:
        raise SchemaError(f"model expects {model.n_features} columns, got {X.shape[1]}")
    temperature = model.temperature if temperature is None else temperature
    params = graph_params(model) if params is None else params
    n_rows = X.shape[0]
    d = model.n_features
    sets = np.stack([np.arange(d), np.arange(d)], axis=1)
    layer_in = X
    total = None
    leafs, outputs, selections = [], [], []
    for li, layer in enumerate(model.layers):
        sel = _select_layer(layer, sets, params.logits[li].value)
        g = select_inputs(layer_in, params.logits[li], sel.masks, temperature, hard)
        h_split = split_probabilities(g, params.thresholds[li], params.log_slopes[li], temperature, hard)
        e = leaf_assignment(h_split)
        out = tree_output(e, params.leaf_weights[li])
        leafs.append(e)
        outputs.append(out)
        selections.append(sel)
        primary = ag.sum_(out[:, :, 0], axis=1)
        total = primary if total is None else total + primary
        if li + 1 < model.n_layers:
            flat = ag.reshape(out, (n_rows, layer.n_trees * layer.out_dim))
            layer_in = ag.concat([layer_in, flat], axis=1)
            sets = np.concatenate([sets, np.repeat(sel.tree_sets, layer.out_dim, axis=0)], axis=0)
    scores = total / float(model.n_trees_total) + params.bias
    return ForwardResult(scores, leafs, outputs, selections)


def init_thresholds(model: ModelState, X: np.ndarray, rng: np.random.Generator) -> None:
    """Set every threshold to the selected value of a randomly drawn batch row.

    Layers are initialised in order so that later layers see the outputs of
    already-initialised earlier trees.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n = X.shape[0]
    d = model.n_features
    sets = np.stack([np.arange(d), np.arange(d)], axis=1)
    layer_in = X
    for layer in model.layers:
        sel = _select_layer(layer, sets)
        g2 = select_inputs(ag.const(layer_in), ag.const(layer.logits), sel.masks, model.temperature).value
        g = g2[head_of_depth(model.depth)]  # (C, B, m)
        rows = rng.integers(0, n, size=layer.thresholds.shape)
        trees = np.arange(layer.n_trees)[:, None]
        depths = np.arange(model.depth)[None, :]
        layer.thresholds[...] = g[depths, rows, trees]
        e = leaf_assignment(
            split_probabilities(
                ag.const(g2),
                ag.const(layer.thresholds),
                ag.const(layer.log_slopes),
                model.temperature,
            )
        )
        out = tree_output(e, ag.const(layer.leaf_weights)).value
        layer_in = np.concatenate([layer_in, out.reshape(n, -1)], axis=1)
        sets = np.concatenate([sets, np.repeat(sel.tree_sets, layer.out_dim, axis=0)], axis=0)


def leaf_counts(model: ModelState, X: np.ndarray, temperature: float | None = None) -> list[np.ndarray]:
    """Soft leaf occupancy summed over rows, one ``(m, 2**C)`` array per layer."""
    res = forward(model, X, temperature)
    return [e.value.sum(axis=1).T for e in res.leaf_probs]


def predict_scores(
    model: ModelState, X: np.ndarray, hard: bool | None = None, chunk: int = 4096
) -> np.ndarray:
    """Scores for already-scaled rows; hard evaluation once the model is annealed."""
    hard = model.is_hardened if hard is None else hard
    X = np.atleast_2d(np.asarray(X, dtype=float))
    parts = [
        forward(model, X[i : i + chunk], hard=hard).scores.value for i in range(0, len(X), chunk)
    ]
    return np.concatenate(parts) if parts else np.zeros(0)
