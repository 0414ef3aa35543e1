"""Command line: ``simpa {train,eval,plot-data,inspect-checkpoint}``.

Seed precedence: ``--seed``, then the SIMPA_SEED environment variable,
then the config's ``train.seed``. Configuration errors exit with status 2
and name the offending field.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .checkpoint import CheckpointError
from .config import PRESETS, ConfigError, load_config
from .experiments import (
    ArchitectureMismatch,
    ResumeMismatch,
    TrainingAborted,
    emit_plot_data,
    inspect_checkpoint,
    load_report,
    run_eval,
    run_train,
)

SEED_ENV = "SIMPA_SEED"


def resolve_seed(flag: int | None) -> int | None:
    if flag is not None:
        return flag
    env = os.environ.get(SEED_ENV)
    if env is None or env == "":
        return None
    try:
        return int(env)
    except ValueError:
        raise ConfigError(SEED_ENV, f"must be an integer, got {env!r}") from None


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help=f"JSON config path or preset name ({', '.join(PRESETS)})")
    p.add_argument("--seed", type=int, default=None, help=f"overrides the config seed (default: ${SEED_ENV})")
    p.add_argument("--mode", choices=("simpa", "maml"), default=None)
    p.add_argument("--inner-grad", choices=("first", "second"), default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="simpa", description="Implicit-prior PAC-Bayes few-shot meta-learning")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="meta-train and write checkpoint + metrics log")
    _common(p)
    p.add_argument("--out", default="runs/train", help="output directory")
    p.add_argument("--checkpoint", default=None, help="resume from this checkpoint")
    p.add_argument("--iterations", type=int, default=None, help="override the iteration budget")

    p = sub.add_parser("eval", help="evaluate a checkpoint on fresh tasks")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default="runs/eval")
    p.add_argument("--n-tasks", type=int, default=None)
    p.add_argument("--n-oracle", type=int, default=0, help="hidden oracle points per task for the bound tally")

    p = sub.add_parser("plot-data", help="write plot CSVs from eval reports")
    p.add_argument("reports", nargs="+", help="report.json files written by eval")
    p.add_argument("--out", default="runs/plots")

    p = sub.add_parser("inspect-checkpoint", help="print a checkpoint summary as JSON")
    p.add_argument("--checkpoint", required=True)
    return parser


def _config(args):
    cfg = load_config(args.config)
    return cfg.with_overrides(seed=resolve_seed(args.seed), mode=args.mode, inner_grad=args.inner_grad)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "train":
            cfg = _config(args)
            res = run_train(cfg, args.out, resume=args.checkpoint, iterations=args.iterations)
            print(json.dumps({"checkpoint": str(res.checkpoint), "metrics": str(res.metrics_path), "iteration": res.state.iteration}))
        elif args.command == "eval":
            cfg = _config(args)
            rep = run_eval(cfg, args.checkpoint, args.n_tasks, args.out, n_oracle=args.n_oracle)
            print(json.dumps(rep.summary, sort_keys=True))
        elif args.command == "plot-data":
            paths = emit_plot_data([load_report(p) for p in args.reports], args.out)
            print("\n".join(str(p) for p in paths))
        else:
            print(json.dumps(inspect_checkpoint(args.checkpoint), indent=2))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, ArchitectureMismatch, ResumeMismatch, TrainingAborted, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
