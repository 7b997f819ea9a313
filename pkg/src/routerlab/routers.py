"""Router variants.

Each router maps token states ``X`` of shape ``(..., H)`` to per-token
probability rows of shape ``(..., E)``. Two forward paths exist:

* :meth:`Router.probabilities` is the plain numpy path used for inference and
  characterization.
* :meth:`Router.graph_probabilities` builds the same computation on a
  :class:`~routerlab.grad.Tape` so it can be differentiated.

Tests pin the two paths to each other.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace

import numpy as np
import scipy.linalg

from . import numcore
from .errors import ParameterError, ShapeError
from .grad import Node, Tape, straight_through_topk

ROUTER_NAMES = ("linear", "attention", "mlp", "hybrid", "mlp-hadamard", "hash", "self-supervised")


@dataclass(frozen=True)
class RouterConfig:
    hidden_size: int = 768
    num_experts: int = 8
    top_k: int = 2
    qk_dim: int = 64
    mlp_hidden: int | None = None  # None -> 128, or H for mlp-hadamard
    temperature: float = 1.0
    use_bias: bool = False  # linear router only; MLP blocks always carry biases
    activation: str = "gelu"
    init_std: float = 0.02
    key_init: str = "normal"  # attention expert keys: normal | uniform
    hybrid_learned_mix: bool = True
    router_top_k: int = 2
    orth_lambda: float = 0.0
    hadamard_init: bool = False
    ss_hidden: int = 128
    ss_dim: int = 64
    ss_temperature: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("hidden_size", "num_experts", "top_k", "qk_dim", "router_top_k", "ss_hidden", "ss_dim"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.mlp_hidden is not None and self.mlp_hidden < 1:
            raise ParameterError(f"mlp_hidden must be >= 1, got {self.mlp_hidden}")
        if self.top_k > self.num_experts:
            raise ParameterError(f"top_k={self.top_k} exceeds num_experts={self.num_experts}")
        if not self.temperature > 0 or not self.ss_temperature > 0:
            raise ParameterError("temperatures must be positive")
        if self.orth_lambda < 0:
            raise ParameterError("orth_lambda must be >= 0")
        if self.key_init not in ("normal", "uniform"):
            raise ParameterError(f"key_init must be 'normal' or 'uniform', got {self.key_init!r}")
        if self.activation not in numcore.ACTIVATIONS:
            raise ParameterError(f"unknown activation {self.activation!r}")

    def updated(self, **changes) -> "RouterConfig":
        return replace(self, **changes)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


class Router:
    """Common surface of every router.

    ``params`` maps block names to float64 arrays; every entry is trainable
    and counted by :meth:`param_count`.
    """

    name = "base"

    def __init__(self, config: RouterConfig):
        self.config = config
        self.params: dict[str, np.ndarray] = {}

    @property
    def num_experts(self) -> int:
        return self.config.num_experts

    @property
    def hidden_size(self) -> int:
        return self.config.hidden_size

    def param_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def _flat(self, X) -> tuple[np.ndarray, tuple]:
        X = numcore.as_tensor(X)
        if X.ndim < 1 or X.shape[-1] != self.hidden_size:
            raise ShapeError(f"{self.name} router expects last dim {self.hidden_size}, got shape {X.shape}")
        return X.reshape(-1, self.hidden_size), X.shape[:-1]

    def probabilities(self, X) -> np.ndarray:
        flat, lead = self._flat(X)
        return self._probs(flat).reshape(lead + (self.num_experts,))

    __call__ = probabilities

    def _probs(self, X: np.ndarray) -> np.ndarray:
        return numcore.softmax(self._logits(X))

    def _logits(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def bind(self, tape: Tape) -> dict[str, Node]:
        return {k: tape.param(v, name=f"{self.name}.{k}") for k, v in self.params.items()}

    def graph_probabilities(self, tape: Tape, p: dict[str, Node], x: Node) -> Node:
        """Differentiable forward on a ``(N, H)`` node."""
        return tape.softmax(self.graph_logits(tape, p, x))

    def graph_logits(self, tape: Tape, p: dict[str, Node], x: Node) -> Node:
        raise NotImplementedError

    def graph_regularizer(self, tape: Tape, p: dict[str, Node]) -> Node | None:
        return None


def _normal(rng: numcore.Rng, shape, std) -> np.ndarray:
    return rng.normal(shape, 0.0, std)


class LinearRouter(Router):
    name = "linear"

    def __init__(self, config: RouterConfig, rng: numcore.Rng | None = None):
        super().__init__(config)
        rng = rng or numcore.Rng(config.seed)
        E, H = config.num_experts, config.hidden_size
        self.params["W"] = _normal(rng, (E, H), config.init_std)
        if config.use_bias:
            self.params["b"] = np.zeros(E)

    def _logits(self, X):
        z = X @ self.params["W"].T
        if "b" in self.params:
            z = z + self.params["b"]
        return z

    def graph_logits(self, tape, p, x):
        z = x @ p["W"].T
        if "b" in p:
            z = z + p["b"]
        return z


class AttentionRouter(Router):
    """Tokens are L2-normalized queries scored against learned expert keys."""

    name = "attention"

    def __init__(self, config: RouterConfig, rng: numcore.Rng | None = None):
        super().__init__(config)
        rng = rng or numcore.Rng(config.seed)
        E, H, dk = config.num_experts, config.hidden_size, config.qk_dim
        self.params["W_q"] = _normal(rng, (dk, H), config.init_std)
        if config.key_init == "normal":
            self.params["K"] = _normal(rng, (E, dk), config.init_std)
        else:
            bound = config.init_std * math.sqrt(3.0)  # same variance as the normal init
            self.params["K"] = rng.uniform((E, dk), -bound, bound)
        self.scale = 1.0 / (math.sqrt(dk) * config.temperature)

    def _logits(self, X):
        q = numcore.l2_normalize(X @ self.params["W_q"].T)
        return (q @ self.params["K"].T) * self.scale

    def graph_logits(self, tape, p, x):
        q = tape.l2_normalize(x @ p["W_q"].T)
        return (q @ p["K"].T) * self.scale


class MlpRouter(Router):
    name = "mlp"
    default_hidden = 128

    def __init__(self, config: RouterConfig, rng: numcore.Rng | None = None):
        super().__init__(config)
        rng = rng or numcore.Rng(config.seed)
        E, H = config.num_experts, config.hidden_size
        self.d_h = config.mlp_hidden or self.default_hidden
        std = config.init_std
        self.params["W1"] = _normal(rng, (self.d_h, H), std)
        self.params["b1"] = np.zeros(self.d_h)
        self.params["W2"] = _normal(rng, (E, self.d_h), std)
        self.params["b2"] = np.zeros(E)

    def _hidden(self, X):
        return numcore.activation(X @ self.params["W1"].T + self.params["b1"], self.config.activation)

    def _logits(self, X):
        return self._hidden(X) @ self.params["W2"].T + self.params["b2"]

    def graph_logits(self, tape, p, x):
        h = tape.activation(x @ p["W1"].T + p["b1"], self.config.activation)
        return h @ p["W2"].T + p["b2"]


class HybridRouter(Router):
    """Convex mix of linear and attention logits, gated by a 2-way softmax."""

    name = "hybrid"

    def __init__(self, config: RouterConfig, rng: numcore.Rng | None = None):
        super().__init__(config)
        rng = rng or numcore.Rng(config.seed)
        self.linear = LinearRouter(config.updated(use_bias=False), rng)
        self.attention = AttentionRouter(config, rng)
        self.params["W"] = self.linear.params["W"]
        self.params["W_q"] = self.attention.params["W_q"]
        self.params["K"] = self.attention.params["K"]
        mix = np.zeros(2)
        if config.hybrid_learned_mix:
            self.params["mix"] = mix
        else:
            self.fixed_mix = mix

    @property
    def mix(self) -> np.ndarray:
        return self.params["mix"] if "mix" in self.params else self.fixed_mix

    def set_mix(self, values) -> None:
        self.mix[...] = np.asarray(values, dtype=np.float64)

    def mix_weights(self) -> np.ndarray:
        return numcore.softmax(self.mix)

    def _logits(self, X):
        w = self.mix_weights()
        return w[0] * self.linear._logits(X) + w[1] * self.attention._logits(X)

    def graph_logits(self, tape, p, x):
        mix = p["mix"] if "mix" in p else tape.const(self.fixed_mix)
        w = tape.softmax(mix)
        lin = self.linear.graph_logits(tape, {"W": p["W"]}, x)
        att = self.attention.graph_logits(tape, {"W_q": p["W_q"], "K": p["K"]}, x)
        return w[0] * lin + w[1] * att


def hadamard_rows(n_rows: int, width: int) -> np.ndarray:
    """First ``n_rows`` rows of the Sylvester Hadamard matrix of order ``width``,
    scaled to unit norm."""
    if width & (width - 1) or n_rows > width:
        raise ParameterError(f"Hadamard init needs a power-of-two width >= {n_rows}, got {width}")
    return scipy.linalg.hadamard(width).astype(np.float64)[:n_rows] / math.sqrt(width)


class MlpHadamardRouter(Router):
    """MLP features gate the token elementwise; output is hard top-k sparse."""

    name = "mlp-hadamard"

    def __init__(self, config: RouterConfig, rng: numcore.Rng | None = None):
        super().__init__(config)
        rng = rng or numcore.Rng(config.seed)
        E, H = config.num_experts, config.hidden_size
        self.d_h = config.mlp_hidden or H
        self.router_top_k = min(config.router_top_k, E)
        std = config.init_std
        self.params["W1"] = _normal(rng, (self.d_h, H), std)
        self.params["b1"] = np.zeros(self.d_h)
        if self.d_h != H:
            self.params["W_p"] = _normal(rng, (self.d_h, H), std)
        if config.hadamard_init:
            self.params["W2"] = hadamard_rows(E, self.d_h)
        else:
            self.params["W2"] = _normal(rng, (E, self.d_h), std)
        self.params["b2"] = np.zeros(E)

    def _logits(self, X):
        h = numcore.activation(X @ self.params["W1"].T + self.params["b1"], self.config.activation)
        xp = X @ self.params["W_p"].T if "W_p" in self.params else X
        return (h * xp) @ self.params["W2"].T + self.params["b2"]

    def _probs(self, X):
        p = numcore.softmax(self._logits(X))
        idx = numcore.topk_indices(p, self.router_top_k)
        kept = np.take_along_axis(p, idx, axis=-1)
        out = np.zeros_like(p)
        np.put_along_axis(out, idx, kept / kept.sum(axis=-1, keepdims=True), axis=-1)
        return out

    def graph_logits(self, tape, p, x):
        h = tape.activation(x @ p["W1"].T + p["b1"], self.config.activation)
        xp = x @ p["W_p"].T if "W_p" in p else x
        return (h * xp) @ p["W2"].T + p["b2"]

    def graph_probabilities(self, tape, p, x):
        return straight_through_topk(tape, tape.softmax(self.graph_logits(tape, p, x)), self.router_top_k)

    def orthogonality_penalty(self) -> float:
        W2 = self.params["W2"]
        d = W2 @ W2.T - np.eye(W2.shape[0])
        return float(self.config.orth_lambda * np.sum(d * d))

    def graph_regularizer(self, tape, p):
        if self.config.orth_lambda == 0:
            return None
        d = p["W2"] @ p["W2"].T - np.eye(self.num_experts)
        return tape.sum(tape.square(d)) * self.config.orth_lambda


_FNV_OFFSET = np.uint64(0xCBF29CE484222325)
_FNV_PRIME = np.uint64(0x100000001B3)


def _fmix64(h: np.ndarray) -> np.ndarray:
    h = h ^ (h >> np.uint64(33))
    h = h * np.uint64(0xFF51AFD7ED558CCD)
    h = h ^ (h >> np.uint64(33))
    h = h * np.uint64(0xC4CEB9FE1A85EC53)
    return h ^ (h >> np.uint64(33))


def sign_hash(X: np.ndarray) -> np.ndarray:
    """64-bit hash of the sign pattern of the first 64 coordinates of each row.

    The sign bits are packed into 8 bytes, folded with FNV-1a and finished with
    the murmur3 64-bit avalanche so the low bits are usable for ``mod E``.
    """
    bits = np.signbit(X[:, :64])
    if bits.shape[1] < 64:
        bits = np.pad(bits, ((0, 0), (0, 64 - bits.shape[1])))
    packed = np.packbits(bits, axis=1).astype(np.uint64)
    h = np.full(X.shape[0], _FNV_OFFSET, dtype=np.uint64)
    for col in range(packed.shape[1]):
        h = (h ^ packed[:, col]) * _FNV_PRIME
    return _fmix64(h)


class HashRouter(Router):
    """Parameter-free one-hot routing by hashing the token's sign pattern."""

    name = "hash"

    def __init__(self, config: RouterConfig, rng: numcore.Rng | None = None):
        super().__init__(config)
        self.salt = np.uint64(config.seed)

    def expert_index(self, X) -> np.ndarray:
        flat, lead = self._flat(X)
        h = _fmix64(sign_hash(flat) ^ self.salt) if self.salt else sign_hash(flat)
        return (h % np.uint64(self.num_experts)).astype(np.int64).reshape(lead)

    def _probs(self, X):
        idx = self.expert_index(X)
        out = np.zeros((X.shape[0], self.num_experts))
        out[np.arange(X.shape[0]), idx] = 1.0
        return out

    def graph_probabilities(self, tape, p, x):
        return tape.const(self._probs(x.value))


class SelfSupervisedRouter(Router):
    """Linear routing head over features from a 2-layer extractor."""

    name = "self-supervised"

    def __init__(self, config: RouterConfig, rng: numcore.Rng | None = None):
        super().__init__(config)
        rng = rng or numcore.Rng(config.seed)
        E, H = config.num_experts, config.hidden_size
        dh, ds = config.ss_hidden, config.ss_dim
        std = config.init_std
        self.params["A1"] = _normal(rng, (dh, H), std)
        self.params["a1"] = np.zeros(dh)
        self.params["A2"] = _normal(rng, (ds, dh), std)
        self.params["a2"] = np.zeros(ds)
        self.params["W_route"] = _normal(rng, (E, ds), std)
        self.params["b_route"] = np.zeros(E)

    def features(self, X) -> np.ndarray:
        flat, lead = self._flat(X)
        h = numcore.activation(flat @ self.params["A1"].T + self.params["a1"], self.config.activation)
        return (h @ self.params["A2"].T + self.params["a2"]).reshape(lead + (self.config.ss_dim,))

    def _logits(self, X):
        return self.features(X) @ self.params["W_route"].T + self.params["b_route"]

    def graph_features(self, tape, p, x):
        h = tape.activation(x @ p["A1"].T + p["a1"], self.config.activation)
        return h @ p["A2"].T + p["a2"]

    def graph_logits(self, tape, p, x):
        return self.graph_features(tape, p, x) @ p["W_route"].T + p["b_route"]


ROUTER_CLASSES: dict[str, type[Router]] = {
    cls.name: cls
    for cls in (LinearRouter, AttentionRouter, MlpRouter, HybridRouter, MlpHadamardRouter, HashRouter, SelfSupervisedRouter)
}


def build_router(name: str, config: RouterConfig | None = None, rng: numcore.Rng | None = None) -> Router:
    try:
        cls = ROUTER_CLASSES[name]
    except KeyError:
        raise ParameterError(f"unknown router {name!r}; valid names: {', '.join(ROUTER_NAMES)}") from None
    return cls(config or RouterConfig(), rng)


def param_count(router: Router) -> int:
    return router.param_count()


def contrastive_loss(anchor, positive, negatives, temperature: float = 1.0) -> float:
    """InfoNCE over cosine similarities; the positive competes with the negatives."""
    if len(negatives) == 0:
        raise ParameterError("contrastive_loss needs at least one negative")
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    a = numcore.l2_normalize(numcore.as_tensor(anchor, ndim=1))
    cands = numcore.l2_normalize(np.stack([numcore.as_tensor(positive, ndim=1)] + [numcore.as_tensor(n, ndim=1) for n in negatives]))
    if cands.shape[1] != a.shape[0]:
        raise ShapeError("anchor, positive and negatives must share a dimension")
    z = cands @ a / temperature
    zmax = z.max()
    return float(-(z[0] - zmax - math.log(np.exp(z - zmax).sum())))


def graph_contrastive_loss(tape: Tape, anchors: Node, positives: Node, negatives: Node, temperature: float) -> Node:
    """Batched InfoNCE: row i of ``anchors`` vs row i of ``positives`` against all
    rows of ``negatives`` (shapes (N, d), (N, d), (M, d))."""
    a = tape.l2_normalize(anchors)
    pos = tape.sum(a * tape.l2_normalize(positives), axis=1)
    neg = a @ tape.l2_normalize(negatives).T
    n = anchors.shape[0]
    logits = tape.concat([tape.reshape(pos, (n, 1)), neg], axis=1) * (1.0 / temperature)
    return tape.cross_entropy(logits, np.zeros(n, dtype=np.int64))
