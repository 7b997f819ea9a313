"""Experiment orchestration: inputs, characterization campaigns, figure data."""

from __future__ import annotations

import csv
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numcore
from .errors import FormatError, ParameterError, ShapeError
from .formats import load_config, load_embeddings
from .grad import Tape, backward
from .metrics import (
    CharacterizationRow,
    check_row,
    latency_benchmark,
    mean_topk_probability,
    output_stats,
    rows_to_csv,
    rows_to_json,
    token_entropy,
    utilization,
)
from .moe import MoeLayer, RoutingDecision
from .optim import Adam
from .routers import ROUTER_NAMES, RouterConfig, SelfSupervisedRouter, build_router

log = logging.getLogger(__name__)

_PGM_HEADER = re.compile(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s")


@dataclass
class ExperimentConfig:
    router: str = "linear"
    batch_size: int = 16
    seq_len: int = 128
    hidden_size: int = 768
    num_experts: int = 8
    top_k: int = 2
    qk_dim: int = 64
    mlp_hidden: int | None = None
    temperature: float = 1.0
    activation: str = "gelu"
    init_std: float = 0.02
    key_init: str = "normal"
    use_bias: bool = False
    hybrid_learned_mix: bool = True
    router_top_k: int = 2
    orth_lambda: float = 0.0
    d_ff: int | None = None
    expert_kind: str = "standard"
    alpha_aux: float = 0.005
    aux_form: str = "squared"
    runs: int = 1024
    reps: int = 5
    warmup: int = 32
    seed: int = 0
    embeddings: str | None = None
    # toy fine-tuning
    lr: float = 2e-4
    train_batch: int = 2
    grad_accum: int = 4
    steps: int = 50
    log_every: int = 10
    train_hidden: int = 64
    train_seq_len: int = 256
    optimizer: str = "adam"

    def __post_init__(self):
        if self.router not in ROUTER_NAMES:
            raise ParameterError(f"unknown router {self.router!r}; valid names: {', '.join(ROUTER_NAMES)}")
        for name in ("batch_size", "seq_len", "runs", "reps", "train_batch", "grad_accum", "steps",
                     "log_every", "train_hidden", "train_seq_len"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ParameterError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        self.router_config()  # validate the router part eagerly

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        return load_config(path, cls)

    def router_config(self, hidden_size: int | None = None) -> RouterConfig:
        return RouterConfig(
            hidden_size=hidden_size or self.hidden_size,
            num_experts=self.num_experts,
            top_k=self.top_k,
            qk_dim=self.qk_dim,
            mlp_hidden=self.mlp_hidden,
            temperature=self.temperature,
            use_bias=self.use_bias,
            activation=self.activation,
            init_std=self.init_std,
            key_init=self.key_init,
            hybrid_learned_mix=self.hybrid_learned_mix,
            router_top_k=self.router_top_k,
            orth_lambda=self.orth_lambda,
            seed=self.seed,
        )

    def build_layer(self, router_name: str | None = None) -> MoeLayer:
        router = build_router(router_name or self.router, self.router_config())
        return MoeLayer.build(
            router, k=self.top_k, d_ff=self.d_ff, kind=self.expert_kind,
            rng=numcore.Rng(self.seed).spawn(1), std=self.init_std, activation=self.activation,
            alpha_aux=self.alpha_aux, aux_form=self.aux_form,
        )


def generate_random_states(cfg: ExperimentConfig, rng: numcore.Rng | None = None) -> np.ndarray:
    rng = rng or numcore.Rng(cfg.seed).spawn(2)
    return rng.normal((cfg.batch_size, cfg.seq_len, cfg.hidden_size), 0.0, 1.0)


def load_inputs(cfg: ExperimentConfig) -> np.ndarray:
    if cfg.embeddings is None:
        return generate_random_states(cfg)
    X = load_embeddings(cfg.embeddings)
    if X.shape[-1] != cfg.hidden_size:
        raise ShapeError(f"{cfg.embeddings}: hidden size {X.shape[-1]} != configured {cfg.hidden_size}")
    return X


@dataclass
class CharacterizationReport:
    rows: list[CharacterizationRow]
    input_source: str
    decisions: dict[str, RoutingDecision] = field(default_factory=dict, repr=False)
    outputs: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def to_csv(self) -> str:
        return rows_to_csv(self.rows)

    def to_json(self) -> str:
        return rows_to_json(self.rows)


def characterize_layer(layer: MoeLayer, X, name: str, cfg: ExperimentConfig,
                       timing: bool = True) -> tuple[CharacterizationRow, RoutingDecision, np.ndarray]:
    y, decision, aux = layer.forward(X)
    if timing:
        lat_r = latency_benchmark(layer, cfg.runs, cfg.reps, cfg.warmup, target="router", seed=cfg.seed).median_us
        lat_t = latency_benchmark(layer, cfg.runs, cfg.reps, cfg.warmup, target="total", seed=cfg.seed).median_us
    else:
        lat_r = lat_t = 0.0
    row = CharacterizationRow(
        router=name,
        param_count=layer.router.param_count(),
        latency_router_us=lat_r,
        latency_total_us=lat_t,
        entropy_nats=token_entropy(decision.probabilities),
        mean_topk_prob=mean_topk_probability(decision),
        output_std=output_stats(y).std,
        aux_loss=aux,
        utilization=utilization(decision).tolist(),
    )
    check_row(row)
    return row, decision, y


def characterize(cfg: ExperimentConfig, routers: list[str] | None = None, timing: bool = True) -> CharacterizationReport:
    """One row per router, all evaluated on the same inputs."""
    names = routers or [cfg.router]
    X = load_inputs(cfg)
    report = CharacterizationReport([], cfg.embeddings or "random")
    for name in names:
        log.info("characterizing %s router", name)
        layer = cfg.build_layer(name)
        row, decision, y = characterize_layer(layer, X, name, cfg, timing)
        report.rows.append(row)
        report.decisions[name] = decision
        report.outputs[name] = y
    return report


# -- figure data -----------------------------------------------------------

def _write_pgm(path: Path, matrix: np.ndarray) -> None:
    pixels = np.rint(np.clip(matrix, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = _PGM_HEADER.match(data)
    if m is None:
        raise FormatError(f"{path}: not a binary PGM")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise FormatError(f"{path}: expected maxval 255, got {maxval}")
    # exactly one whitespace byte separates the header from the pixels
    return np.frombuffer(data[m.end(): m.end() + w * h], dtype=np.uint8).reshape(h, w)


def export_figure_data(decision: RoutingDecision, Y, prefix, fmt: str = "csv", bar_tokens: int = 5) -> list[Path]:
    """Write heatmap, per-token bar and output-histogram data next to ``prefix``."""
    if fmt not in ("csv", "pgm"):
        raise ParameterError(f"format must be 'csv' or 'pgm', got {fmt!r}")
    prefix = Path(prefix)
    P = decision.flat().probabilities
    written = []

    heat = prefix.with_name(prefix.name + "_heatmap.csv")
    with open(heat, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["token"] + [f"expert_{e}" for e in range(P.shape[1])])
        for t, row in enumerate(P):
            w.writerow([t] + [f"{v:.9f}" for v in row])
    written.append(heat)

    if fmt == "pgm":
        pgm = prefix.with_name(prefix.name + "_heatmap.pgm")
        _write_pgm(pgm, P)
        written.append(pgm)

    bars = prefix.with_name(prefix.name + "_tokens.csv")
    with open(bars, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["token", "expert", "probability", "selected"])
        selected = decision.flat().indices
        for t in range(min(bar_tokens, P.shape[0])):
            for e in range(P.shape[1]):
                w.writerow([t, e, f"{P[t, e]:.9f}", int(e in selected[t])])
    written.append(bars)

    stats = output_stats(Y)
    hist = prefix.with_name(prefix.name + "_hist.csv")
    with open(hist, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, c in zip(stats.bin_edges[:-1], stats.bin_edges[1:], stats.counts):
            w.writerow([f"{lo:.9g}", f"{hi:.9g}", int(c)])
    written.append(hist)
    return written


def read_heatmap_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return np.array([[float(v) for v in r[1:]] for r in rows[1:]])


# -- self-supervised pretraining -------------------------------------------

def pretrain_self_supervised(router: SelfSupervisedRouter, tokens, steps: int = 200, lr: float = 1e-2,
                             batch: int = 32, noise: float = 0.3, seed: int = 0) -> list[float]:
    """Train the feature extractor with InfoNCE on augmented views.

    The positive of each token is a copy with Gaussian noise; negatives are
    the other tokens of the minibatch. Only the extractor is updated.
    """
    X = numcore.as_tensor(tokens).reshape(-1, router.hidden_size)
    rng = numcore.Rng(seed)
    keys = ["A1", "a1", "A2", "a2"]
    opt = Adam({k: router.params[k] for k in keys}, lr=lr)
    losses = []
    for _ in range(steps):
        pick = rng.generator.choice(X.shape[0], size=min(batch, X.shape[0]), replace=False)
        xa = X[pick] + noise * rng.normal((pick.size, X.shape[1]))
        xb = X[pick] + noise * rng.normal((pick.size, X.shape[1]))
        tape = Tape()
        p = router.bind(tape)
        fa = router.graph_features(tape, p, tape.const(xa))
        fb = router.graph_features(tape, p, tape.const(xb))
        loss = _info_nce_in_batch(tape, fa, fb, router.config.ss_temperature)
        grads = backward(tape, loss)
        opt.step({k: grads[p[k].id] for k in keys})
        losses.append(float(loss.value))
    return losses


def _info_nce_in_batch(tape: Tape, fa, fb, temperature: float):
    a = tape.l2_normalize(fa)
    b = tape.l2_normalize(fb)
    logits = (a @ b.T) * (1.0 / temperature)
    n = fa.shape[0]
    return tape.cross_entropy(logits, np.arange(n))

