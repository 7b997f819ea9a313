"""Routing characterization metrics and the per-token latency protocol."""

from __future__ import annotations

import csv
import io
import json
import math
import statistics
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.special import entr
from threadpoolctl import threadpool_limits

from . import numcore
from .errors import ParameterError
from .moe import MoeLayer, RoutingDecision, dispatch_fractions

HIST_BINS = 64
HIST_HALF_WIDTH_STDS = 4.0


def utilization(decision: RoutingDecision) -> np.ndarray:
    """Share of token-slots sent to each expert (dispatch fraction / k); sums to 1."""
    if decision.num_tokens == 0:
        raise ParameterError("empty routing decision")
    return dispatch_fractions(decision) / decision.k


def _entropy(p: np.ndarray, axis=None) -> np.ndarray:
    # entr gives -p log p with 0 log 0 = 0; the + 0.0 turns -0.0 into 0.0
    return entr(p).sum(axis=axis) + 0.0


def routing_entropy(decision: RoutingDecision, num_experts: int | None = None) -> float:
    """Entropy in nats of the batch expert-utilization distribution."""
    u = utilization(decision)
    if num_experts is not None and num_experts != u.shape[0]:
        raise ParameterError(f"decision covers {u.shape[0]} experts, not {num_experts}")
    return float(_entropy(u))


def token_entropy(P) -> float:
    """Mean over tokens of the entropy (nats) of each probability row."""
    P = numcore.as_tensor(P)
    if P.size == 0:
        raise ParameterError("empty probability tensor")
    return float(np.mean(_entropy(P.reshape(-1, P.shape[-1]), axis=-1)) + 0.0)


def mean_topk_probability(decision: RoutingDecision) -> float:
    """Mean of the raw router probabilities at the selected slots."""
    d = decision.flat()
    if d.num_tokens == 0:
        raise ParameterError("empty routing decision")
    return float(np.take_along_axis(d.probabilities, d.indices, axis=-1).mean())


@dataclass
class OutputStats:
    mean: float
    std: float
    bin_edges: np.ndarray
    counts: np.ndarray


def output_stats(Y, bins: int = HIST_BINS) -> OutputStats:
    """Population mean/std and a histogram over ``mean +- 4 std``.

    A constant tensor gets a unit-width range so it lands in one bin.
    """
    y = numcore.as_tensor(Y).reshape(-1)
    if y.size == 0:
        raise ParameterError("output_stats of an empty tensor")
    mean = float(y.mean())
    std = float(y.std())
    half = HIST_HALF_WIDTH_STDS * std if std > 0 else 0.5
    counts, edges = np.histogram(np.clip(y, mean - half, mean + half), bins=bins, range=(mean - half, mean + half))
    return OutputStats(mean, std, edges, counts)


@dataclass
class LatencyStats:
    """Per-token latency in microseconds, averaged over repetitions."""

    mean_us: float
    median_us: float
    p99_us: float
    rep_medians_us: list[float] = field(default_factory=list)


def _time_calls(fn: Callable[[], object], runs: int, reps: int, warmup: int) -> LatencyStats:
    clock = time.perf_counter_ns
    for _ in range(warmup):
        fn()
    means, medians, p99s = [], [], []
    for _ in range(reps):
        samples = np.empty(runs)
        for i in range(runs):
            t0 = clock()
            fn()
            samples[i] = clock() - t0
        samples /= 1e3
        means.append(float(samples.mean()))
        medians.append(float(np.median(samples)))
        p99s.append(float(np.percentile(samples, 99)))
    return LatencyStats(statistics.fmean(means), statistics.fmean(medians), statistics.fmean(p99s), medians)


def latency_benchmark(layer: MoeLayer, runs: int = 1024, reps: int = 5, warmup: int = 32,
                      target: str = "total", seed: int = 0) -> LatencyStats:
    """Time single-token forwards (batch 1, sequence 1) on one thread.

    ``target="router"`` times the router alone; ``"total"`` the full layer.
    """
    if runs < 1 or reps < 1 or warmup < 0:
        raise ParameterError("runs and reps must be >= 1, warmup >= 0")
    x = numcore.Rng(seed).normal((1, 1, layer.router.hidden_size))
    if target == "router":
        fn = lambda: layer.router.probabilities(x)  # noqa: E731
    elif target == "total":
        fn = lambda: layer.forward(x)  # noqa: E731
    else:
        raise ParameterError(f"target must be 'router' or 'total', got {target!r}")
    with threadpool_limits(limits=1):
        return _time_calls(fn, runs, reps, warmup)


@dataclass
class CharacterizationRow:
    router: str
    param_count: int
    latency_router_us: float
    latency_total_us: float
    entropy_nats: float
    mean_topk_prob: float
    output_std: float
    aux_loss: float
    utilization: list[float]

    def csv_values(self) -> list[str]:
        head = [self.router, str(self.param_count)]
        nums = [self.latency_router_us, self.latency_total_us, self.entropy_nats,
                self.mean_topk_prob, self.output_std, self.aux_loss, *self.utilization]
        return head + [repr(float(v)) for v in nums]


def csv_header(num_experts: int) -> list[str]:
    return ["router", "param_count", "latency_router_us", "latency_total_us", "entropy_nats",
            "mean_topk_prob", "output_std", "aux_loss"] + [f"util_{e}" for e in range(num_experts)]


def rows_to_csv(rows: list[CharacterizationRow]) -> str:
    if not rows:
        raise ParameterError("no rows to serialize")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(csv_header(len(rows[0].utilization)))
    for row in rows:
        w.writerow(row.csv_values())
    return buf.getvalue()


def rows_from_csv(text: str) -> list[CharacterizationRow]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    n_util = sum(1 for h in header if h.startswith("util_"))
    if header != csv_header(n_util):
        raise ParameterError(f"unexpected CSV header {header}")
    rows = []
    for rec in reader:
        vals = [float(v) for v in rec[2:]]
        rows.append(CharacterizationRow(rec[0], int(rec[1]), *vals[:6], utilization=vals[6:]))
    return rows


def rows_to_json(rows: list[CharacterizationRow]) -> str:
    return json.dumps([asdict(r) for r in rows], indent=2)


def check_row(row: CharacterizationRow) -> None:
    E = len(row.utilization)
    if not 0.0 <= row.entropy_nats <= math.log(E) + 1e-12:
        raise ParameterError(f"entropy {row.entropy_nats} outside [0, ln {E}]")
    if abs(sum(row.utilization) - 1.0) > 1e-9:
        raise ParameterError("utilization does not sum to 1")
