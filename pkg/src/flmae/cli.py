"""Command-line entry point.

Subcommands: pretrain-central, pretrain-fed, ablation, compare, probe, cost.
Exit codes: 0 success, 2 configuration error, 3 aborted run.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import experiment
from .config import ConfigError, ExperimentConfig, load_config, write_echo
from .federation import RoundAbortedError
from .mae import load_checkpoint

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ABORTED = 3


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None,
                        help="flat key=value config file (defaults used if omitted)")
    parser.add_argument("--seed", type=int, default=None, help="override master seed")
    parser.add_argument("--out", type=Path, default=None, help="output directory")
    parser.add_argument("--strategy", action="append", default=None,
                        help="strategy/row name; repeatable for ablation subsets")
    parser.add_argument("--reps", type=int, default=None, help="override replication count")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flmae",
        description="Desk-scale federated masked-autoencoder pretraining simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in [
        ("pretrain-central", "train the pooled-data baseline"),
        ("pretrain-fed", "run one federated configuration"),
        ("ablation", "run the strategy comparison sweep"),
        ("compare", "paired significance test between two checkpoints"),
        ("probe", "full-vs-frozen downstream probe"),
        ("cost", "communication and compute accounting"),
    ]:
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        if name == "compare":
            p.add_argument("--model-a", type=Path, required=True)
            p.add_argument("--model-b", type=Path, required=True)
        if name == "probe":
            p.add_argument("--encoder", type=Path, required=True,
                           help="checkpoint supplying the pretrained weights")
            p.add_argument("--mode", choices=["full", "frozen", "both"], default="both")
        if name == "cost":
            p.add_argument("--params", type=float, default=None,
                           help="override the parameter count (e.g. 116.66e6)")
            p.add_argument("--bytes-per-param", type=int, default=None)
    return parser


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig({})
    if args.seed is not None:
        cfg.values["seed"] = args.seed
    if args.reps is not None:
        cfg.values["reps"] = args.reps
    if args.out is not None:
        cfg.values["out"] = str(args.out)
    violations = cfg.validate()
    if violations:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(violations))
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load(args)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG

    outdir = Path(cfg["out"])
    outdir.mkdir(parents=True, exist_ok=True)
    write_echo(cfg, outdir)
    strategies = args.strategy

    try:
        if args.command == "pretrain-central":
            result = experiment.run_single(cfg, outdir, "centralized")
            if result.status != "ok":
                print("run aborted: completion fraction unmet", file=sys.stderr)
                return EXIT_ABORTED
            print(f"centralized: eval_mse={result.final_mse:.6f} "
                  f"counts={result.final_counts} (swa {result.swa_counts})")
        elif args.command == "pretrain-fed":
            strategy = strategies[0] if strategies else None
            result = experiment.run_configured_federated(cfg, outdir, strategy=strategy)
            print(f"{result.row}: eval_mse={result.final_mse:.6f} "
                  f"counts={result.final_counts} (swa {result.swa_counts})")
        elif args.command == "ablation":
            results = experiment.run_ablation(cfg, outdir, rows=strategies)
            for r in results:
                counts = r.final_counts if r.status == "ok" else "failed"
                print(f"{r.row} rep{r.rep}: {counts}")
        elif args.command == "compare":
            report = experiment.compare_checkpoints(cfg, args.model_a, args.model_b, outdir)
            print(f"W={report['W']} p={report['p']:.6g} winner={report['winner']}"
                  f"{report['significance_mark']}")
        elif args.command == "probe":
            _, weights = load_checkpoint(args.encoder)
            modes = ("full", "frozen") if args.mode == "both" else (args.mode,)
            reports = experiment.run_probe_suite(cfg, weights, outdir, modes=modes)
            for r in reports:
                print(f"{r.mode} seed={r.seed}: acc={r.accuracy:.3f} f1={r.f1_macro:.3f}")
        elif args.command == "cost":
            payload = experiment.cost_report(cfg, outdir, params_override=args.params,
                                             bytes_per_param=args.bytes_per_param)
            comm = payload["communication"]
            print(f"per-round bidirectional: {comm['bidirectional_mb_per_round_per_client']:.2f} MB; "
                  f"total: {comm['total_gb']:.4f} GB")
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    except RoundAbortedError as exc:
        print(f"run aborted: {exc}", file=sys.stderr)
        return EXIT_ABORTED
    except (FileNotFoundError, ValueError) as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
