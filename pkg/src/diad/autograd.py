"""A small reverse-mode differentiation engine.

Only the operations the tree ensemble needs are provided: elementwise
arithmetic, two-operand einsum contractions, reductions, indexing and
concatenation, the entmax-1.5 / entmoid-1.5 pair, an outer product over the
last axis, and the hinge / softplus nonlinearities used by the labeled
losses.  Values are plain numpy arrays.

Example:
    >>> w = param(np.array([1.0, 2.0, 3.0]))
    >>> loss = sum_(w * w)
    >>> backward(loss)
    >>> w.grad
    array([2., 4., 6.])
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, InvalidInputError

__all__ = [
    "Node",
    "param",
    "const",
    "backward",
    "zero_grad",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "square",
    "relu",
    "softplus",
    "sum_",
    "mean",
    "reshape",
    "group_sum",
    "take",
    "concat",
    "einsum",
    "outer_last",
    "branch_split",
    "leaf_response",
    "transpose",
    "entmax",
    "entmoid",
    "entmax_alpha",
    "entmoid_value",
    "AdamState",
    "adam_step",
]


class Node:
    """One vertex of a computation graph.

    ``grad`` of a parameter accumulates across :func:`backward` calls until
    :func:`zero_grad` resets it.  Interior nodes hold the gradient of the most
    recent backward pass only.
    """

    __slots__ = ("op", "inputs", "value", "_grad", "requires_grad", "_backward")

    def __init__(
        self,
        value,
        op: str = "const",
        inputs: tuple[Node, ...] = (),
        backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
        requires_grad: bool = False,
    ):
        self.value = np.asarray(value, dtype=float)
        self.op = op
        self.inputs = inputs
        self._backward = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in inputs)
        self._grad: np.ndarray | None = None

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, value: np.ndarray) -> None:
        self._grad = value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(op={self.op!r}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return _getitem(self, key)


def param(value) -> Node:
    """Leaf node whose gradient is tracked."""
    return Node(np.array(value, dtype=float), op="param", requires_grad=True)


def const(value) -> Node:
    return Node(value, op="const")


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else const(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # sum over the axes numpy broadcasting expanded
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _topo_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.inputs:
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))
    return order


def backward(root: Node) -> None:
    """Populate ``.grad`` of every parameter reachable from a scalar root."""
    if root.value.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = _topo_order(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.op == "param":
            node.grad = node.grad + g
            continue
        node.grad = g
        if node._backward is None:
            continue
        for parent, pg in zip(node.inputs, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


def zero_grad(params: Sequence[Node]) -> None:
    for p in params:
        p.grad = np.zeros_like(p.value)


# --- elementwise ----------------------------------------------------------


def add(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    return Node(
        a.value + b.value,
        "add",
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    return Node(
        a.value - b.value,
        "sub",
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    return Node(
        a.value * b.value,
        "mul",
        (a, b),
        lambda g: (
            _unbroadcast(g * b.value, a.shape),
            _unbroadcast(g * a.value, b.shape),
        ),
    )


def div(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    out = a.value / b.value

    def _bw(g):
        ga = g / b.value
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return Node(out, "div", (a, b), _bw)


def neg(a: Node) -> Node:
    return Node(-a.value, "neg", (a,), lambda g: (-g,))


def exp(a: Node) -> Node:
    out = np.exp(a.value)
    return Node(out, "exp", (a,), lambda g: (g * out,))


def square(a: Node) -> Node:
    return Node(a.value**2, "square", (a,), lambda g: (2.0 * g * a.value,))


def relu(a: Node) -> Node:
    """``max(x, 0)``; the subgradient at 0 is taken as 0."""
    pos = a.value > 0
    return Node(np.where(pos, a.value, 0.0), "relu", (a,), lambda g: (g * pos,))


def softplus(a: Node) -> Node:
    x = a.value
    out = np.logaddexp(0.0, x)
    sig = np.exp(-np.logaddexp(0.0, -x))
    return Node(out, "softplus", (a,), lambda g: (g * sig,))


# --- reductions and structure ---------------------------------------------


def sum_(a: Node, axis=None, keepdims: bool = False) -> Node:
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Node(out, "sum", (a,), _bw)


def mean(a: Node, axis=None, keepdims: bool = False) -> Node:
    count = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum_(a, axis=axis, keepdims=keepdims) / float(count)


def group_sum(a: Node, groups: np.ndarray, n_groups: int, axis: int = 0) -> Node:
    """Sum ``a`` along ``axis`` into ``n_groups`` buckets; returns ``(n_groups, ...)``."""
    groups = np.asarray(groups)
    out = np.stack([np.compress(groups == k, a.value, axis=axis).sum(axis=axis) for k in range(n_groups)])

    def _bw(g):
        return (np.moveaxis(np.take(g, groups, axis=0), 0, axis),)

    return Node(out, "group_sum", (a,), _bw)


def reshape(a: Node, shape) -> Node:
    return Node(a.value.reshape(shape), "reshape", (a,), lambda g: (g.reshape(a.shape),))


def _is_basic_index(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (slice, int, type(Ellipsis))) or k is None for k in parts)


def _getitem(a: Node, key) -> Node:
    basic = _is_basic_index(key)

    def _bw(g):
        full = np.zeros_like(a.value)
        if basic:
            full[key] += g
        else:
            np.add.at(full, key, g)
        return (full,)

    return Node(a.value[key], "getitem", (a,), _bw)


def take(a: Node, indices, axis: int) -> Node:
    indices = np.asarray(indices)

    def _bw(g):
        full = np.zeros_like(a.value)
        moved = np.moveaxis(full, axis, 0)
        g_moved = np.moveaxis(g, axis, 0)
        if indices.ndim == 1 and len(indices) <= 64:
            for i, k in enumerate(indices):
                moved[k] += g_moved[i]
        else:
            np.add.at(moved, indices, g_moved)
        return (full,)

    return Node(np.take(a.value, indices, axis=axis), "take", (a,), _bw)


def concat(nodes: Sequence[Node], axis: int = 0) -> Node:
    nodes = tuple(_as_node(n) for n in nodes)
    sizes = [n.shape[axis] for n in nodes]
    bounds = np.cumsum([0] + sizes)

    def _bw(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            key = [slice(None)] * g.ndim
            key[axis] = slice(lo, hi)
            out.append(g[tuple(key)])
        return tuple(out)

    return Node(np.concatenate([n.value for n in nodes], axis=axis), "concat", nodes, _bw)


def einsum(spec: str, a, b) -> Node:
    """Two-operand contraction such as ``"bk,mhk->bmh"``.

    Every index of an operand must appear in the other operand or in the
    output, and no index may repeat within one operand.
    """
    a, b = _as_node(a), _as_node(b)
    lhs, out_idx = spec.replace(" ", "").split("->")
    ia, ib = lhs.split(",")
    for own, other in ((ia, ib), (ib, ia)):
        if len(set(own)) != len(own):
            raise ContractError(f"repeated index in {spec!r}")
        if any(c not in other and c not in out_idx for c in own):
            raise ContractError(f"index summed within a single operand in {spec!r}")
    out = np.einsum(spec, a.value, b.value, optimize=True)

    def _bw(g):
        ga = np.einsum(f"{out_idx},{ib}->{ia}", g, b.value, optimize=True) if a.requires_grad else None
        gb = np.einsum(f"{out_idx},{ia}->{ib}", g, a.value, optimize=True) if b.requires_grad else None
        return ga, gb

    return Node(out, "einsum", (a, b), _bw)


def outer_last(a: Node, b: Node) -> Node:
    """Outer product over the last axis: ``(..., p), (..., q) -> (..., p*q)``."""
    p, q = a.shape[-1], b.shape[-1]
    out = (a.value[..., :, None] * b.value[..., None, :]).reshape(a.shape[:-1] + (p * q,))

    def _bw(g):
        g = g.reshape(g.shape[:-1] + (p, q))
        ga = (g * b.value[..., None, :]).sum(axis=-1)
        gb = (g * a.value[..., :, None]).sum(axis=-2)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Node(out, "outer", (a, b), _bw)


def branch_split(e: Node, h: Node) -> Node:
    """``concat([h * e, (1 - h) * e], axis=0)`` with ``h`` broadcast over axis 0.

    Prepends one depth to a leaf-membership array laid out as
    ``(leaves, ...)``: the new split becomes the most significant bit of the
    leaf index.
    """
    hv, ev = h.value, e.value
    p = ev.shape[0]
    out = np.concatenate([hv * ev, (1.0 - hv) * ev], axis=0)

    def _bw(g):
        g_hi, g_lo = g[:p], g[p:]
        diff = g_hi - g_lo
        ge = g_lo + hv * diff
        gh = (ev * diff).sum(axis=0)
        return _unbroadcast(ge, e.shape), _unbroadcast(gh, h.shape)

    return Node(out, "branch_split", (e, h), _bw)


def leaf_response(e: Node, w: Node) -> Node:
    """Tree outputs ``out[b, m, o] = sum_l e[l, b, m] * w[m, l, o]``."""
    ev, wv = e.value, w.value
    wt = np.transpose(wv, (2, 1, 0))[:, :, None, :]  # (O, L, 1, m)
    out = np.stack([(ev * wt[o]).sum(axis=0) for o in range(wv.shape[2])], axis=-1)

    def _bw(g):
        ge = gw = None
        if e.requires_grad:
            ge = sum(wt[o] * g[None, :, :, o] for o in range(wv.shape[2]))
        if w.requires_grad:
            gw = np.stack([(ev * g[None, :, :, o]).sum(axis=1).T for o in range(wv.shape[2])], axis=-1)
        return ge, gw

    return Node(out, "leaf_response", (e, w), _bw)


def transpose(a: Node, axes) -> Node:
    inv = np.argsort(axes)
    return Node(np.transpose(a.value, axes), "transpose", (a,), lambda g: (np.transpose(g, inv),))


# --- entmax family --------------------------------------------------------


def _entmax15_kernel(x: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Exact sort-based entmax-1.5 along the last axis."""
    z = x / 2.0
    if mask is not None:
        hi = np.where(mask, z, -np.inf).max(axis=-1, keepdims=True)
        # anything 10 below the max is outside the support (tau >= max - 1)
        z = np.where(mask, z, hi - 10.0)
    z = z - z.max(axis=-1, keepdims=True)
    zs = -np.sort(-z, axis=-1)
    d = z.shape[-1]
    rho = np.arange(1, d + 1, dtype=float)
    mean_ = np.cumsum(zs, axis=-1) / rho
    mean_sq = np.cumsum(zs * zs, axis=-1) / rho
    ss = rho * (mean_sq - mean_**2)
    delta = np.clip((1.0 - ss) / rho, 0.0, None)
    tau = mean_ - np.sqrt(delta)
    support = (tau <= zs).sum(axis=-1, keepdims=True)
    tau_star = np.take_along_axis(tau, support - 1, axis=-1)
    p = np.clip(z - tau_star, 0.0, None) ** 2
    if mask is not None:
        p = np.where(mask, p, 0.0)
    return p


def _entmax15_vjp(p: np.ndarray, g: np.ndarray) -> np.ndarray:
    gppr = np.sqrt(p)
    dx = g * gppr
    q = dx.sum(axis=-1, keepdims=True) / gppr.sum(axis=-1, keepdims=True)
    return dx - q * gppr


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise InvalidInputError(f"{what} contains non-finite values")


def entmax(logits: Node, temperature: float = 1.0, mask: np.ndarray | None = None) -> Node:
    """Graph op: entmax-1.5 of ``logits / temperature`` along the last axis.

    Entries where ``mask`` is False get exactly zero probability.
    """
    if temperature <= 0:
        raise ContractError("temperature must be positive")
    _check_finite(logits.value, "logits")
    if mask is not None and not np.all(mask.any(axis=-1)):
        raise ContractError("every entmax row needs at least one unmasked entry")
    p = _entmax15_kernel(logits.value / temperature, mask)
    return Node(p, "entmax", (logits,), lambda g: (_entmax15_vjp(p, g) / temperature,))


def entmax_alpha(logits, temperature: float = 1.0, alpha: float = 1.5) -> np.ndarray:
    """Entmax with ``alpha = 1.5`` over the last axis of a numpy array."""
    if alpha != 1.5:
        raise ContractError("only alpha = 1.5 is supported")
    if temperature <= 0:
        raise ContractError("temperature must be positive")
    logits = np.asarray(logits, dtype=float)
    _check_finite(logits, "logits")
    return _entmax15_kernel(logits / temperature)


def entmoid_value(x, temperature: float = 1.0) -> np.ndarray:
    """Two-class entmax-1.5 used as a sparse sigmoid; saturates for ``|x/T| >= 2``."""
    if temperature <= 0:
        raise ContractError("temperature must be positive")
    y = np.asarray(x, dtype=float) / temperature
    _check_finite(y, "entmoid input")
    a = np.abs(y)
    # threshold tau = (a + r) / 2 with r = sqrt(8 - a^2); the losing class gets
    # (tau - a)^2 / 4 = 1/2 - a r / 8, written so that a = 0 gives exactly 1/2
    r = np.sqrt(np.clip(8.0 - a * a, 0.0, None))
    y_neg = np.where(a < 2.0, np.clip(0.5 - a * r / 8.0, 0.0, None), 0.0)
    return np.where(y >= 0, 1.0 - y_neg, y_neg)


def entmoid(x: Node) -> Node:
    """Graph op for :func:`entmoid_value` at unit temperature."""
    out = entmoid_value(x.value)
    g0, g1 = np.sqrt(out), np.sqrt(1.0 - out)
    slope = g0 * g1 / (g0 + g1)
    return Node(out, "entmoid", (x,), lambda g: (g * slope,))


# --- optimizer ------------------------------------------------------------


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update; arrays in ``params`` are updated in place."""
    if len(params) != len(grads):
        raise ContractError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ContractError(f"shape mismatch: param {p.shape}, grad {g.shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return list(params), state
