"""Toy character-level language model with an MoE block.

byte embedding (256 x H) -> residual MoE block -> output projection (H x 256)
-> softmax cross-entropy against the next byte. Each corpus line is one
training sequence, truncated or zero-padded to the sequence length; padded
positions carry no loss.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import numcore
from .errors import ParameterError
from .grad import Tape, backward
from .moe import MoeLayer
from .optim import SGD, Adam
from .routers import build_router

log = logging.getLogger(__name__)

VOCAB = 256
MIN_CORPUS_BYTES = 1000


@dataclass
class TrainLog:
    initial_loss: float
    entries: list[tuple[int, float]] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [loss for _, loss in self.entries]


class CharModel:
    def __init__(self, router_name: str, cfg, rng: numcore.Rng):
        H = cfg.train_hidden
        self.embed = rng.normal((VOCAB, H), 0.0, cfg.init_std)
        self.proj = rng.normal((VOCAB, H), 0.0, cfg.init_std)
        self.bias = np.zeros(VOCAB)
        router = build_router(router_name, cfg.router_config(hidden_size=H), rng.spawn(7))
        self.layer = MoeLayer.build(
            router, k=cfg.top_k, d_ff=4 * H, kind=cfg.expert_kind, rng=rng.spawn(8),
            std=cfg.init_std, activation=cfg.activation,
            alpha_aux=cfg.alpha_aux, aux_form=cfg.aux_form,
        )

    def named_params(self) -> dict[str, np.ndarray]:
        out = {"embed": self.embed, "proj": self.proj, "bias": self.bias}
        out.update(self.layer.named_params())
        return out

    def loss(self, tape: Tape, inputs: np.ndarray, targets: np.ndarray, weights: np.ndarray):
        p = {k: tape.param(v, name=k) for k, v in self.named_params().items()}
        x = p["embed"][inputs.reshape(-1)]
        y, aux, _ = self.layer.graph_forward(tape, p, x)
        h = x + y
        logits = h @ p["proj"].T + p["bias"]
        task = tape.cross_entropy(logits, targets.reshape(-1), weights.reshape(-1))
        total = task + aux
        rp = {k[len("router."):]: v for k, v in p.items() if k.startswith("router.")}
        reg = self.layer.router.graph_regularizer(tape, rp)
        if reg is not None:
            total = total + reg
        return total, task, p


def encode_lines(corpus: bytes, seq_len: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Lines -> (inputs, targets, weights), each of shape (n_lines, seq_len - 1)."""
    lines = [ln for ln in corpus.split(b"\n") if ln.strip()]
    ids = np.zeros((len(lines), seq_len), dtype=np.int64)
    mask = np.zeros((len(lines), seq_len))
    for i, ln in enumerate(lines):
        ln = ln[:seq_len]
        ids[i, : len(ln)] = np.frombuffer(ln, dtype=np.uint8)
        mask[i, : len(ln)] = 1.0
    return ids[:, :-1], ids[:, 1:], mask[:, 1:]


def train_toy(cfg, corpus: bytes, router_name: str | None = None) -> TrainLog:
    """Run ``cfg.steps`` optimizer steps; log the mean micro-batch loss every
    ``cfg.log_every`` steps.

    One step accumulates gradients over ``cfg.grad_accum`` micro-batches of
    ``cfg.train_batch`` lines. The first micro-batch loss before any update is
    reported as ``initial_loss``.
    """
    if len(corpus) < MIN_CORPUS_BYTES:
        raise ParameterError(f"corpus has {len(corpus)} bytes, need at least {MIN_CORPUS_BYTES}")
    inputs, targets, weights = encode_lines(corpus, cfg.train_seq_len)
    if inputs.shape[0] < cfg.train_batch:
        raise ParameterError("corpus has fewer lines than one micro-batch")
    rng = numcore.Rng(cfg.seed)
    model = CharModel(router_name or cfg.router, cfg, rng.spawn(3))
    params = model.named_params()
    opt = Adam(params, lr=cfg.lr) if cfg.optimizer == "adam" else SGD(params, lr=cfg.lr)
    order_rng = rng.spawn(4)

    def batches():
        while True:
            order = order_rng.generator.permutation(inputs.shape[0])
            for i in range(0, len(order) - cfg.train_batch + 1, cfg.train_batch):
                yield order[i : i + cfg.train_batch]

    stream = batches()
    result = TrainLog(initial_loss=float("nan"))
    window: list[float] = []
    for step in range(1, cfg.steps + 1):
        acc = {k: np.zeros_like(v) for k, v in params.items()}
        for _ in range(cfg.grad_accum):
            idx = next(stream)
            tape = Tape()
            total, task, p = model.loss(tape, inputs[idx], targets[idx], weights[idx])
            if np.isnan(result.initial_loss):
                result.initial_loss = float(task.value)
            grads = backward(tape, total)
            for k, node in p.items():
                acc[k] += grads[node.id]
            window.append(float(task.value))
        opt.step({k: g / cfg.grad_accum for k, g in acc.items()})
        if step % cfg.log_every == 0:
            mean_loss = float(np.mean(window))
            result.entries.append((step, mean_loss))
            log.info("step %d loss %.4f", step, mean_loss)
            window = []
    return result
