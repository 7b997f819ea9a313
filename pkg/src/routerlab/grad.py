"""A small define-by-run reverse-mode gradient engine.

Every op appended to a :class:`Tape` records its forward rule and its
vector-Jacobian product, so the tape can be replayed with perturbed parameter
values (used by :func:`finite_diff_check`) and differentiated in exact reverse
order by :func:`backward`.

Parameter nodes hold a *reference* to the caller's array: an in-place optimizer
update on the array is visible to the next tape built from it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from . import numcore
from .errors import ParameterError, ShapeError

ForwardFn = Callable[..., tuple[np.ndarray, Any]]
BackwardFn = Callable[..., tuple]


@dataclass(eq=False)
class Node:
    id: int
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    tape: "Tape" = field(repr=False)
    name: str | None = None
    grad: np.ndarray | None = field(default=None, repr=False)
    ctx: Any = field(default=None, repr=False)
    fwd: ForwardFn | None = field(default=None, repr=False)
    bwd: BackwardFn | None = field(default=None, repr=False)

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return self.tape.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return self.tape.sub(self, other)

    def __rsub__(self, other):
        return self.tape.sub(other, self)

    def __mul__(self, other):
        return self.tape.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Node):
            raise TypeError("division by a node is not supported")
        return self.tape.mul(self, 1.0 / other)

    def __neg__(self):
        return self.tape.mul(self, -1.0)

    def __matmul__(self, other):
        return self.tape.matmul(self, other)

    def __getitem__(self, key):
        return self.tape.getitem(self, key)

    @property
    def T(self):
        return self.tape.transpose(self)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Tape:
    """Ordered record of nodes; the order is a valid topological order."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.parameters: set[int] = set()

    # -- leaves ---------------------------------------------------------
    def param(self, value: np.ndarray, name: str | None = None) -> Node:
        if not isinstance(value, np.ndarray) or value.dtype != np.float64:
            raise ParameterError("parameters must be float64 numpy arrays")
        node = self._leaf("param", value, name)
        self.parameters.add(node.id)
        return node

    def const(self, value, name: str | None = None) -> Node:
        return self._leaf("const", np.asarray(value, dtype=np.float64), name)

    def _leaf(self, op, value, name):
        node = Node(len(self.nodes), op, (), value, self, name=name)
        self.nodes.append(node)
        return node

    def _lift(self, x) -> Node:
        return x if isinstance(x, Node) else self.const(x)

    def push(self, op: str, inputs: list[Node], fwd: ForwardFn, bwd: BackwardFn) -> Node:
        """Append an op node. ``fwd(*vals) -> (value, ctx)``;
        ``bwd(g, out, ctx, *vals) -> grads`` (one per input, ``None`` allowed)."""
        vals = [n.value for n in inputs]
        value, ctx = fwd(*vals)
        node = Node(len(self.nodes), op, tuple(n.id for n in inputs), value, self,
                    ctx=ctx, fwd=fwd, bwd=bwd)
        self.nodes.append(node)
        return node

    def replay(self) -> None:
        """Recompute every op node from the current leaf values."""
        for node in self.nodes:
            if node.fwd is not None:
                vals = [self.nodes[i].value for i in node.inputs]
                node.value, node.ctx = node.fwd(*vals)

    # -- elementwise / linear algebra -----------------------------------
    def add(self, a, b) -> Node:
        a, b = self._lift(a), self._lift(b)
        return self.push(
            "add", [a, b],
            lambda x, y: (x + y, None),
            lambda g, out, ctx, x, y: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape)),
        )

    def sub(self, a, b) -> Node:
        a, b = self._lift(a), self._lift(b)
        return self.push(
            "sub", [a, b],
            lambda x, y: (x - y, None),
            lambda g, out, ctx, x, y: (_unbroadcast(g, x.shape), -_unbroadcast(g, y.shape)),
        )

    def mul(self, a, b) -> Node:
        a, b = self._lift(a), self._lift(b)
        return self.push(
            "mul", [a, b],
            lambda x, y: (x * y, None),
            lambda g, out, ctx, x, y: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)),
        )

    def matmul(self, a: Node, b: Node) -> Node:
        a, b = self._lift(a), self._lift(b)
        if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul shapes {a.shape} @ {b.shape}")
        return self.push(
            "matmul", [a, b],
            lambda x, y: (x @ y, None),
            lambda g, out, ctx, x, y: (g @ y.T, x.T @ g),
        )

    def transpose(self, a: Node) -> Node:
        return self.push("transpose", [a], lambda x: (x.T, None), lambda g, out, ctx, x: (g.T,))

    def reshape(self, a: Node, shape) -> Node:
        return self.push(
            "reshape", [a],
            lambda x: (x.reshape(shape), None),
            lambda g, out, ctx, x: (g.reshape(x.shape),),
        )

    def activation(self, a: Node, kind: str) -> Node:
        numcore.activation(np.zeros(1), kind)  # validates kind eagerly
        return self.push(
            f"act:{kind}", [a],
            lambda x: (numcore.activation(x, kind), None),
            lambda g, out, ctx, x: (g * numcore.activation_grad(x, kind),),
        )

    def log(self, a: Node) -> Node:
        return self.push("log", [a], lambda x: (np.log(x), None), lambda g, out, ctx, x: (g / x,))

    def square(self, a: Node) -> Node:
        return self.push("square", [a], lambda x: (x * x, None), lambda g, out, ctx, x: (2.0 * g * x,))

    # -- reductions -----------------------------------------------------
    def sum(self, a: Node, axis: int | None = None) -> Node:
        def bwd(g, out, ctx, x):
            if axis is None:
                return (np.broadcast_to(g, x.shape).copy(),)
            return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

        return self.push("sum", [a], lambda x: (np.asarray(x.sum(axis=axis)), None), bwd)

    def mean(self, a: Node, axis: int | None = None) -> Node:
        n = a.value.size if axis is None else a.shape[axis]
        return self.sum(a, axis) * (1.0 / n)

    # -- indexing -------------------------------------------------------
    def getitem(self, a: Node, key) -> Node:
        def bwd(g, out, ctx, x):
            gx = np.zeros_like(x)
            np.add.at(gx, key, g)
            return (gx,)

        return self.push("getitem", [a], lambda x: (np.asarray(x[key]), None), bwd)

    def scatter_rows(self, a: Node, rows: np.ndarray, n_rows: int) -> Node:
        """Sum row ``i`` of ``a`` into row ``rows[i]`` of an ``n_rows``-row zero tensor."""
        rows = np.asarray(rows)

        def fwd(x):
            out = np.zeros((n_rows,) + x.shape[1:])
            np.add.at(out, rows, x)
            return out, None

        return self.push("scatter_rows", [a], fwd, lambda g, out, ctx, x: (g[rows],))

    def concat(self, parts: list[Node], axis: int = 0) -> Node:
        parts = [self._lift(p) for p in parts]
        sizes = [p.shape[axis] for p in parts]
        cuts = np.cumsum(sizes)[:-1]
        return self.push(
            "concat", parts,
            lambda *xs: (np.concatenate(xs, axis=axis), None),
            lambda g, out, ctx, *xs: tuple(np.split(g, cuts, axis=axis)),
        )

    # -- row-wise probability ops (last axis) ---------------------------
    def softmax(self, a: Node, temperature: float = 1.0) -> Node:
        def fwd(x):
            return numcore.softmax(x, temperature), None

        def bwd(g, s, ctx, x):
            return ((s * (g - np.sum(g * s, axis=-1, keepdims=True))) / temperature,)

        return self.push("softmax", [a], fwd, bwd)

    def l2_normalize(self, a: Node, epsilon: float = 1e-12) -> Node:
        def fwd(x):
            norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
            return x / np.maximum(norm, epsilon), norm

        def bwd(g, y, norm, x):
            live = norm > epsilon
            proj = (g - y * np.sum(g * y, axis=-1, keepdims=True)) / np.maximum(norm, epsilon)
            return (np.where(live, proj, g / epsilon),)

        return self.push("l2_normalize", [a], fwd, bwd)

    def renormalize(self, a: Node) -> Node:
        """Divide each row by its sum."""
        def fwd(x):
            s = x.sum(axis=-1, keepdims=True)
            return x / s, s

        def bwd(g, y, s, x):
            return ((g - np.sum(g * y, axis=-1, keepdims=True)) / s,)

        return self.push("renormalize", [a], fwd, bwd)

    def topk_mask(self, a: Node, k: int) -> Node:
        """Zero all but the top-k entries per row.

        Straight-through: the upstream gradient passes unchanged on the selected
        entries and is zero elsewhere. The selection is recomputed on replay.
        """
        def fwd(x):
            idx = numcore.topk_indices(x, k)
            mask = np.zeros_like(x)
            np.put_along_axis(mask, idx, 1.0, axis=-1)
            return x * mask, mask

        return self.push(f"topk_mask:{k}", [a], fwd, lambda g, out, mask, x: (g * mask,))

    def cross_entropy(self, logits: Node, targets: np.ndarray, weights: np.ndarray | None = None) -> Node:
        """Mean softmax cross-entropy over rows, optionally weighted (0 = ignore)."""
        targets = np.asarray(targets, dtype=np.int64)
        w = np.ones(targets.shape) if weights is None else np.asarray(weights, dtype=np.float64)
        denom = w.sum()
        if denom <= 0:
            raise ParameterError("cross_entropy needs at least one weighted row")
        rows = np.arange(targets.shape[0])

        def fwd(z):
            zmax = z.max(axis=-1, keepdims=True)
            logz = np.log(np.exp(z - zmax).sum(axis=-1, keepdims=True)) + zmax
            logp = z - logz
            return np.asarray(-(w * logp[rows, targets]).sum() / denom), logp

        def bwd(g, out, logp, z):
            d = np.exp(logp)
            d[rows, targets] -= 1.0
            return (g * d * (w / denom)[:, None],)

        return self.push("cross_entropy", [logits], fwd, bwd)


def backward(tape: Tape, loss: Node | int) -> dict[int, np.ndarray]:
    """Reverse pass from a scalar loss node.

    Sets ``node.grad`` on every node reached and returns the gradients of the
    trainable parameters, keyed by node id. Gradients from repeated uses of a
    node are summed.
    """
    loss_node = tape.nodes[loss] if isinstance(loss, int) else loss
    if loss_node.value.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss_node.value.shape}")
    for node in tape.nodes:
        node.grad = None
    loss_node.grad = np.ones_like(loss_node.value)
    for node in reversed(tape.nodes[: loss_node.id + 1]):
        if node.grad is None or node.bwd is None:
            continue
        vals = [tape.nodes[i].value for i in node.inputs]
        grads = node.bwd(node.grad, node.value, node.ctx, *vals)
        for i, gi in zip(node.inputs, grads):
            if gi is None:
                continue
            src = tape.nodes[i]
            if src.op == "const":
                continue
            src.grad = gi if src.grad is None else src.grad + gi
    out = {}
    for pid in sorted(tape.parameters):
        node = tape.nodes[pid]
        out[pid] = node.grad if node.grad is not None else np.zeros_like(node.value)
    return out


def straight_through_topk(tape: Tape, probabilities: Node, k: int) -> Node:
    """Top-k masked, renormalized probabilities.

    Forward keeps the k largest entries of each row and rescales them to sum to
    one. Backward uses the straight-through mask (identity on the kept
    entries) followed by the exact derivative of the rescaling.
    """
    n = probabilities.shape[-1]
    if not 1 <= k <= n:
        raise ParameterError(f"k must be in [1, {n}], got {k}")
    return tape.renormalize(tape.topk_mask(probabilities, k))


def finite_diff_check(
    tape: Tape,
    loss: Node | int,
    h: float = 1e-5,
    max_entries: int = 24,
    seed: int = 0,
) -> float:
    """Max relative error between :func:`backward` and central differences.

    Up to ``max_entries`` coordinates of every parameter are sampled. The
    relative error of one coordinate is
    ``|analytic - numeric| / (|numeric| + 1e-12)``.
    """
    if not h > 0:
        raise ParameterError(f"h must be positive, got {h}")
    loss_node = tape.nodes[loss] if isinstance(loss, int) else loss
    tape.replay()
    analytic = {pid: g.copy() for pid, g in backward(tape, loss_node).items()}
    rng = np.random.default_rng(seed)
    worst = 0.0
    for pid, grad in analytic.items():
        arr = tape.nodes[pid].value
        flat = arr.reshape(-1)
        count = min(max_entries, flat.size)
        picks = rng.choice(flat.size, size=count, replace=False)
        for j in picks:
            orig = flat[j]
            flat[j] = orig + h
            tape.replay()
            up = float(loss_node.value)
            flat[j] = orig - h
            tape.replay()
            down = float(loss_node.value)
            flat[j] = orig
            numeric = (up - down) / (2.0 * h)
            err = abs(grad.reshape(-1)[j] - numeric) / (abs(numeric) + 1e-12)
            worst = max(worst, err)
    tape.replay()
    return worst
