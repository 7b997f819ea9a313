"""Command-line entry point: ``routerlab <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime or I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import numcore
from .errors import FormatError, ParameterError, RouterLabError, ShapeError
from .formats import save_embeddings
from .metrics import latency_benchmark
from .routers import ROUTER_NAMES, build_router
from .runner import ExperimentConfig, characterize, export_figure_data, generate_random_states
from .training import train_toy

log = logging.getLogger("routerlab")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


# flag dest -> ExperimentConfig field
_CONFIG_FLAGS = {
    "router": "router",
    "experts": "num_experts",
    "top_k": "top_k",
    "hidden": "hidden_size",
    "runs": "runs",
    "reps": "reps",
    "seed": "seed",
    "embeddings": "embeddings",
    "batch": "batch_size",
    "seq_len": "seq_len",
    "qk_dim": "qk_dim",
    "mlp_hidden": "mlp_hidden",
    "d_ff": "d_ff",
    "steps": "steps",
    "lr": "lr",
    "log_every": "log_every",
    "train_seq_len": "train_seq_len",
}


def _add_common(p: argparse.ArgumentParser, router_required: bool = False) -> None:
    p.add_argument("--config", metavar="PATH", help="key=value experiment config; flags override it")
    p.add_argument("--router", choices=ROUTER_NAMES, metavar="NAME",
                   help=f"router variant, one of: {', '.join(ROUTER_NAMES)}")
    p.add_argument("--experts", type=int, metavar="E", help="number of experts (default 8)")
    p.add_argument("--top-k", type=int, metavar="K", help="experts per token (default 2)")
    p.add_argument("--hidden", type=int, metavar="H", help="hidden size (default 768)")
    p.add_argument("--qk-dim", type=int, metavar="D", help="attention query/key width (default 64)")
    p.add_argument("--mlp-hidden", type=int, metavar="D", help="MLP router hidden width")
    p.add_argument("--seed", type=int, help="random seed (default 0)")


def _add_inputs(p: argparse.ArgumentParser) -> None:
    p.add_argument("--embeddings", metavar="PATH", help="MOEB embedding file instead of random states")
    p.add_argument("--batch", type=int, metavar="B", help="batch size for random states (default 16)")
    p.add_argument("--seq-len", type=int, metavar="S", help="sequence length for random states (default 128)")
    p.add_argument("--d-ff", type=int, metavar="D", help="expert FFN width (default 4*H)")


def _add_timing(p: argparse.ArgumentParser) -> None:
    p.add_argument("--runs", type=int, help="single-token forwards per repetition (default 1024)")
    p.add_argument("--reps", type=int, help="timed repetitions (default 5)")


def _add_output(p: argparse.ArgumentParser, formats=("csv", "json")) -> None:
    p.add_argument("--format", choices=formats, default=formats[0], help=f"output format: {' | '.join(formats)}")
    p.add_argument("--output", "-o", metavar="PATH", help="write here instead of standard output")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="routerlab", description="Mixture-of-experts router laboratory.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("characterize", help="parameter, entropy, utilization and latency report")
    _add_common(p)
    _add_inputs(p)
    _add_timing(p)
    _add_output(p)
    p.add_argument("--all", action="store_true", help="one row per router (all seven)")
    p.add_argument("--no-timing", action="store_true", help="skip latency measurement (columns become 0)")

    p = sub.add_parser("bench", help="per-token latency micro-benchmark")
    _add_common(p)
    _add_timing(p)
    _add_output(p)
    p.add_argument("--d-ff", type=int, metavar="D", help="expert FFN width (default 4*H)")
    p.add_argument("--warmup", type=int, default=32, help="untimed warmup forwards (default 32)")

    p = sub.add_parser("params", help="print the trainable parameter count of a router")
    _add_common(p)
    p.add_argument("--all", action="store_true", help="print 'name,count' for every router")

    p = sub.add_parser("train", help="toy character-level fine-tuning run")
    _add_common(p)
    _add_output(p)
    p.add_argument("--corpus", metavar="PATH", required=True, help="text file, one training sequence per line")
    p.add_argument("--steps", type=int, help="optimizer steps (default 50)")
    p.add_argument("--lr", type=float, help="learning rate (default 2e-4)")
    p.add_argument("--log-every", type=int, help="log interval in steps (default 10)")
    p.add_argument("--train-seq-len", type=int, help="sequence length (default 256)")

    p = sub.add_parser("export", help="write heatmap, per-token and histogram figure data")
    _add_common(p)
    _add_inputs(p)
    _add_output(p, formats=("csv", "pgm"))
    p.add_argument("--prefix", metavar="PATH", required=True, help="output path prefix")

    p = sub.add_parser("gen-embeddings", help="write random hidden states as a MOEB embedding file")
    p.add_argument("--config", metavar="PATH", help="key=value experiment config; flags override it")
    p.add_argument("--batch", type=int, metavar="B", help="batch size (default 16)")
    p.add_argument("--seq-len", type=int, metavar="S", help="sequence length (default 128)")
    p.add_argument("--hidden", type=int, metavar="H", help="hidden size (default 768)")
    p.add_argument("--seed", type=int, help="random seed (default 0)")
    p.add_argument("--output", "-o", metavar="PATH", required=True, help="destination file")
    return parser


def _config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config) if getattr(args, "config", None) else ExperimentConfig()
    overrides = {}
    for flag, key in _CONFIG_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    try:
        return dataclasses.replace(cfg, **overrides)
    except ParameterError as exc:
        raise UsageError(str(exc)) from None


def _emit(text: str, args) -> None:
    if getattr(args, "output", None):
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)


def _cmd_characterize(args) -> None:
    if args.all and args.router:
        raise UsageError("--all and --router are mutually exclusive")
    cfg = _config(args)
    names = list(ROUTER_NAMES) if args.all else [cfg.router]
    report = characterize(cfg, names, timing=not args.no_timing)
    _emit(report.to_csv() if args.format == "csv" else report.to_json() + "\n", args)


def _cmd_bench(args) -> None:
    cfg = _config(args)
    layer = cfg.build_layer()
    result = {"router": cfg.router}
    for target in ("router", "total"):
        stats = latency_benchmark(layer, cfg.runs, cfg.reps, args.warmup, target=target, seed=cfg.seed)
        result.update({f"{target}_mean_us": stats.mean_us, f"{target}_median_us": stats.median_us,
                       f"{target}_p99_us": stats.p99_us})
    if args.format == "json":
        _emit(json.dumps(result, indent=2) + "\n", args)
    else:
        keys = list(result)
        _emit(",".join(keys) + "\n" + ",".join(str(result[k]) for k in keys) + "\n", args)


def _cmd_params(args) -> None:
    if args.all and args.router:
        raise UsageError("--all and --router are mutually exclusive")
    cfg = _config(args)
    if args.all:
        lines = [f"{n},{build_router(n, cfg.router_config()).param_count()}" for n in ROUTER_NAMES]
        print("\n".join(lines))
    else:
        print(build_router(cfg.router, cfg.router_config()).param_count())


def _cmd_train(args) -> None:
    cfg = _config(args)
    corpus = Path(args.corpus).read_bytes()
    result = train_toy(cfg, corpus)
    if args.format == "json":
        payload = {"router": cfg.router, "initial_loss": result.initial_loss,
                   "log": [{"step": s, "loss": v} for s, v in result.entries]}
        _emit(json.dumps(payload, indent=2) + "\n", args)
    else:
        lines = ["step,loss", f"0,{result.initial_loss!r}"] + [f"{s},{v!r}" for s, v in result.entries]
        _emit("\n".join(lines) + "\n", args)


def _cmd_export(args) -> None:
    cfg = _config(args)
    report = characterize(cfg, [cfg.router], timing=False)
    paths = export_figure_data(report.decisions[cfg.router], report.outputs[cfg.router], args.prefix, args.format)
    print("\n".join(str(p) for p in paths))


def _cmd_gen_embeddings(args) -> None:
    cfg = _config(args)
    save_embeddings(args.output, generate_random_states(cfg, numcore.Rng(cfg.seed).spawn(2)))


_COMMANDS = {
    "characterize": _cmd_characterize,
    "bench": _cmd_bench,
    "params": _cmd_params,
    "train": _cmd_train,
    "export": _cmd_export,
    "gen-embeddings": _cmd_gen_embeddings,
}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"routerlab {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"routerlab: error: no such file: {exc.filename}", file=sys.stderr)
        return 2
    except (OSError, FormatError, ShapeError, RouterLabError) as exc:
        print(f"routerlab: error: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
