"""Top-k mixture-of-experts layer, expert FFNs and the load-balancing loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore
from .errors import ParameterError, ShapeError
from .grad import Node, Tape
from .routers import Router

AUX_FORMS = ("product", "squared")


@dataclass
class RoutingDecision:
    """Per-token expert choice.

    Attributes:
        indices: int array ``(..., k)``, descending probability.
        weights: combine weights ``(..., k)``, each row sums to one.
        probabilities: full router rows ``(..., E)``.
    """

    indices: np.ndarray
    weights: np.ndarray
    probabilities: np.ndarray

    @property
    def k(self) -> int:
        return self.indices.shape[-1]

    @property
    def num_experts(self) -> int:
        return self.probabilities.shape[-1]

    @property
    def num_tokens(self) -> int:
        return int(np.prod(self.indices.shape[:-1]))

    def flat(self) -> "RoutingDecision":
        return RoutingDecision(
            self.indices.reshape(-1, self.k),
            self.weights.reshape(-1, self.k),
            self.probabilities.reshape(-1, self.num_experts),
        )


def select_topk(P, k: int) -> RoutingDecision:
    P = numcore.as_tensor(P)
    E = P.shape[-1]
    if not 1 <= k <= E:
        raise ParameterError(f"k must be in [1, {E}], got {k}")
    idx = numcore.topk_indices(P, k)
    w = np.take_along_axis(P, idx, axis=-1)
    total = w.sum(axis=-1, keepdims=True)
    if np.any(total <= 0):
        raise ParameterError("a probability row has no mass on its top-k entries")
    return RoutingDecision(idx, w / total, P)


def dispatch_fractions(decision: RoutingDecision) -> np.ndarray:
    """Expert load: share of tokens that list each expert among their top-k.

    Sums to k over experts.
    """
    d = decision.flat()
    counts = np.bincount(d.indices.reshape(-1), minlength=d.num_experts).astype(np.float64)
    return counts / d.num_tokens


def importance(P) -> np.ndarray:
    P = numcore.as_tensor(P)
    return P.reshape(-1, P.shape[-1]).mean(axis=0)


def aux_loss(P, decision: RoutingDecision, alpha: float = 0.005, form: str = "squared") -> float:
    """Load-balancing penalty.

    ``product``: ``alpha * E * sum(f * g)``; ``squared``: ``alpha * E * sum(g**2 * f)``
    where ``f`` is the dispatch fraction and ``g`` the mean router probability.
    """
    f = dispatch_fractions(decision)
    g = importance(P)
    E = g.shape[0]
    if form == "product":
        return float(alpha * E * np.sum(f * g))
    if form == "squared":
        return float(alpha * E * np.sum(g * g * f))
    raise ParameterError(f"unknown aux loss form {form!r}; expected one of {AUX_FORMS}")


class ExpertFfn:
    """Feed-forward expert with output width equal to input width.

    ``standard``: ``W_out @ act(W_in @ x + b_in) + b_out``.
    ``swiglu``:   ``W2 @ (silu(W @ x) * (V @ x))``.
    """

    def __init__(self, kind: str, params: dict[str, np.ndarray], activation: str = "gelu"):
        if kind not in ("standard", "swiglu"):
            raise ParameterError(f"unknown expert kind {kind!r}")
        self.kind = kind
        self.params = params
        self.activation = activation
        if kind == "standard":
            d_ff, H = params["W_in"].shape
            if params["W_out"].shape != (H, d_ff) or params["b_in"].shape != (d_ff,) or params["b_out"].shape != (H,):
                raise ShapeError("inconsistent standard expert shapes")
        else:
            d_ff, H = params["W"].shape
            if params["V"].shape != (d_ff, H) or params["W2"].shape != (H, d_ff):
                raise ShapeError("inconsistent swiglu expert shapes")
        self.hidden_size = H
        self.d_ff = d_ff

    @classmethod
    def random(cls, kind: str, hidden_size: int, d_ff: int, rng: numcore.Rng,
               std: float = 0.02, activation: str = "gelu") -> "ExpertFfn":
        H = hidden_size
        if kind == "standard":
            params = {
                "W_in": rng.normal((d_ff, H), 0.0, std),
                "b_in": np.zeros(d_ff),
                "W_out": rng.normal((H, d_ff), 0.0, std),
                "b_out": np.zeros(H),
            }
        elif kind == "swiglu":
            params = {
                "W": rng.normal((d_ff, H), 0.0, std),
                "V": rng.normal((d_ff, H), 0.0, std),
                "W2": rng.normal((H, d_ff), 0.0, std),
            }
        else:
            raise ParameterError(f"unknown expert kind {kind!r}")
        return cls(kind, params, activation)

    def param_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def __call__(self, x) -> np.ndarray:
        x = numcore.as_tensor(x)
        if x.shape[-1] != self.hidden_size:
            raise ShapeError(f"expert expects last dim {self.hidden_size}, got {x.shape}")
        p = self.params
        if self.kind == "standard":
            h = numcore.activation(x @ p["W_in"].T + p["b_in"], self.activation)
            return h @ p["W_out"].T + p["b_out"]
        return (numcore.activation(x @ p["W"].T, "silu") * (x @ p["V"].T)) @ p["W2"].T

    def graph(self, tape: Tape, p: dict[str, Node], x: Node) -> Node:
        if self.kind == "standard":
            h = tape.activation(x @ p["W_in"].T + p["b_in"], self.activation)
            return h @ p["W_out"].T + p["b_out"]
        return (tape.activation(x @ p["W"].T, "silu") * (x @ p["V"].T)) @ p["W2"].T


def expert_forward(expert: ExpertFfn, x) -> np.ndarray:
    return expert(numcore.as_tensor(x, ndim=1))


@dataclass
class MoeOutput:
    y: np.ndarray
    decision: RoutingDecision
    aux: float

    def __iter__(self):
        return iter((self.y, self.decision, self.aux))


class MoeLayer:
    """Router plus E experts; a drop-in replacement for one FFN block.

    Tokens are dispatched to their top-k experts only; there is no capacity
    limit and no token is dropped.
    """

    def __init__(self, router: Router, experts: list[ExpertFfn], k: int = 2,
                 alpha_aux: float = 0.005, aux_form: str = "squared"):
        if len(experts) != router.num_experts:
            raise ParameterError(f"router has {router.num_experts} experts, got {len(experts)} expert FFNs")
        if not 1 <= k <= router.num_experts:
            raise ParameterError(f"k must be in [1, {router.num_experts}], got {k}")
        if aux_form not in AUX_FORMS:
            raise ParameterError(f"unknown aux loss form {aux_form!r}")
        for e in experts:
            if e.hidden_size != router.hidden_size:
                raise ShapeError("expert width differs from router hidden size")
        self.router = router
        self.experts = experts
        self.k = k
        self.alpha_aux = alpha_aux
        self.aux_form = aux_form

    @classmethod
    def build(cls, router: Router, k: int = 2, d_ff: int | None = None, kind: str = "standard",
              rng: numcore.Rng | None = None, std: float = 0.02, activation: str = "gelu",
              **kwargs) -> "MoeLayer":
        rng = rng or numcore.Rng(router.config.seed + 1)
        H = router.hidden_size
        d_ff = d_ff or 4 * H
        experts = [ExpertFfn.random(kind, H, d_ff, rng, std, activation) for _ in range(router.num_experts)]
        return cls(router, experts, k, **kwargs)

    @property
    def num_experts(self) -> int:
        return self.router.num_experts

    def route(self, X) -> RoutingDecision:
        return select_topk(self.router.probabilities(X), self.k)

    def combine(self, X, decision: RoutingDecision) -> np.ndarray:
        X = numcore.as_tensor(X)
        lead = X.shape[:-1]
        flat = X.reshape(-1, X.shape[-1])
        d = decision.flat()
        y = np.zeros_like(flat)
        # fixed expert order keeps the reduction order deterministic
        for e, expert in enumerate(self.experts):
            rows, slots = np.nonzero(d.indices == e)
            if rows.size == 0:
                continue
            out = expert(flat[rows]) * d.weights[rows, slots][:, None]
            np.add.at(y, rows, out)
        return y.reshape(lead + (flat.shape[1],))

    def forward(self, X) -> MoeOutput:
        X = numcore.as_tensor(X)
        if X.shape[-1] != self.router.hidden_size:
            raise ShapeError(f"expected last dim {self.router.hidden_size}, got shape {X.shape}")
        decision = self.route(X)
        y = self.combine(X, decision)
        aux = aux_loss(decision.probabilities, decision, self.alpha_aux, self.aux_form)
        return MoeOutput(y, decision, aux)

    __call__ = forward

    # -- differentiable path --------------------------------------------
    def named_params(self) -> dict[str, np.ndarray]:
        out = {f"router.{k}": v for k, v in self.router.params.items()}
        for i, e in enumerate(self.experts):
            out.update({f"expert{i}.{k}": v for k, v in e.params.items()})
        return out

    def bind(self, tape: Tape) -> dict[str, Node]:
        return {k: tape.param(v, name=k) for k, v in self.named_params().items()}

    def graph_forward(self, tape: Tape, p: dict[str, Node], x: Node) -> tuple[Node, Node, RoutingDecision]:
        """Differentiable forward on ``(N, H)`` tokens.

        Returns (output node, aux-loss node, decision). The top-k selection is
        frozen at build time; gradients reach the router through the
        renormalized combine weights and the importance term of the aux loss.
        """
        if x.value.ndim != 2:
            raise ShapeError(f"graph_forward expects (N, H) tokens, got {x.shape}")
        rp = {k[len("router."):]: v for k, v in p.items() if k.startswith("router.")}
        P = self.router.graph_probabilities(tape, rp, x)
        N = x.shape[0]
        idx = numcore.topk_indices(P.value, self.k)
        rows = np.arange(N)[:, None]
        weights = tape.renormalize(P[rows, idx])
        decision = RoutingDecision(idx, weights.value.copy(), P.value.copy())
        y = None
        for e, expert in enumerate(self.experts):
            r, s = np.nonzero(idx == e)
            if r.size == 0:
                continue
            ep = {k.split(".", 1)[1]: v for k, v in p.items() if k.startswith(f"expert{e}.")}
            out = expert.graph(tape, ep, x[r]) * tape.reshape(weights[r, s], (r.size, 1))
            part = tape.scatter_rows(out, r, N)
            y = part if y is None else y + part
        f = dispatch_fractions(decision)
        g = tape.mean(P, axis=0)
        if self.aux_form == "squared":
            aux = tape.sum(tape.square(g) * f) * (self.alpha_aux * self.num_experts)
        else:
            aux = tape.sum(g * f) * (self.alpha_aux * self.num_experts)
        return y, aux, decision


def moe_forward(layer: MoeLayer, X) -> MoeOutput:
    return layer.forward(X)


def dense_reference(layer: MoeLayer, X, decision: RoutingDecision) -> np.ndarray:
    """Evaluate every expert on every token and sum with a masked weight matrix."""
    X = numcore.as_tensor(X)
    flat = X.reshape(-1, X.shape[-1])
    d = decision.flat()
    gate = np.zeros((flat.shape[0], layer.num_experts))
    np.put_along_axis(gate, d.indices, d.weights, axis=-1)
    y = np.zeros_like(flat)
    for e, expert in enumerate(layer.experts):
        y += gate[:, e:e + 1] * expert(flat)
    return y.reshape(X.shape)


def load_bert_style_experts(layer: MoeLayer, W_int, b_int, W_out, b_out) -> None:
    """Clone one dense FFN (intermediate + output projections) into every expert."""
    W_int, b_int = np.asarray(W_int, np.float64), np.asarray(b_int, np.float64)
    W_out, b_out = np.asarray(W_out, np.float64), np.asarray(b_out, np.float64)
    for e in layer.experts:
        if e.kind != "standard":
            raise ShapeError("weight cloning needs standard two-layer experts")
        shapes = [(W_int, "W_in"), (b_int, "b_in"), (W_out, "W_out"), (b_out, "b_out")]
        for arr, key in shapes:
            if arr.shape != e.params[key].shape:
                raise ShapeError(f"{key}: expected {e.params[key].shape}, got {arr.shape}")
        for arr, key in shapes:
            e.params[key][...] = arr
