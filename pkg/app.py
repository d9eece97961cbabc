#!/usr/bin/env python3
"""
BCRL experiment runner
======================

Command-line entry point for representation learning and offline policy
evaluation experiments on finite MDPs.

Usage:
    python app.py gen      --config CONFIG [--out DIR] [--seed-list 0,1,2]
    python app.py train    --config CONFIG [--out DIR] [--seed-list 0,1,2]
    python app.py eval     --config CONFIG [--out DIR] [--seed-list 0,1,2] [--jobs N]
    python app.py sweep    --config CONFIG --axis {N,K,lambda,seed} --values 500,2000,8000 [--jobs N]
    python app.py plotdata --out RUN_DIR
    python app.py certify  --config CONFIG --checkpoint PATH [--seed-list 0]

Exit codes: 0 success, 2 invalid input, 3 numeric abort.
"""
import argparse
import json
import sys
from typing import List, Optional

from evaluation.pipeline import certify_checkpoint, generate_data, run_experiment, run_sweep, train_only
from utils.config import ExperimentConfig, config_hash, load_config, with_updates
from utils.database import load_summary
from utils.exceptions import BcrlError, ConfigValidationError, MissingInputsError, NumericAbortError
from utils.logging_setup import configure_logging
from utils.visualization import emit_plotdata

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_NUMERIC = 3
VERBS = ("gen", "train", "eval", "sweep", "plotdata", "certify")


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _value_list(text: str) -> List[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Bellman-complete representation learning for offline policy evaluation")
    parser.add_argument("verb", choices=VERBS, help="what to run")
    parser.add_argument("--config", help="experiment config (JSON)")
    parser.add_argument("--out", help="output root; for plotdata, the run directory")
    parser.add_argument("--seed-list", type=_int_list, help="override the config's seeds, e.g. 0,1,2")
    parser.add_argument("--axis", choices=("N", "K", "lambda", "seed"), help="sweep axis")
    parser.add_argument("--values", type=_value_list, help="sweep values, e.g. 500,2000,8000")
    parser.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    parser.add_argument("--checkpoint", help="representation checkpoint for certify")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    return parser


def _config(args: argparse.Namespace) -> ExperimentConfig:
    if not args.config:
        raise ConfigValidationError([f"--config: required for {args.verb}"])
    config = load_config(args.config)
    if args.seed_list:
        config = with_updates(config, {"seeds": args.seed_list})
    return config


def _print_summary(run_dir) -> None:
    for method, row in load_summary(run_dir).items():
        print(f"  {method:24s} rmse={row['rmse']:.4e}  median|err|={row['median_abs_error']:.4e}  n={row['num_seeds']}")


def dispatch(args: argparse.Namespace) -> int:
    if args.verb == "plotdata":
        if not args.out:
            raise ConfigValidationError(["--out: plotdata needs the run directory"])
        written = emit_plotdata(args.out)
        for name, path in written.items():
            print(f"📁 {name:22s} → {path}")
        return EXIT_OK

    config = _config(args)
    print(f"🚀 {args.verb}: {config.name} (config {config_hash(config)}, seeds {config.seeds})")

    if args.verb == "gen":
        print(f"📁 data written to {generate_data(config, args.out)}")
    elif args.verb == "train":
        print(f"📁 checkpoints written to {train_only(config, args.out)}")
    elif args.verb == "eval":
        run_dir = run_experiment(config, args.out, jobs=args.jobs)
        print(f"✅ results written to {run_dir}")
        _print_summary(run_dir)
    elif args.verb == "sweep":
        if not args.axis or not args.values:
            raise ConfigValidationError(["--axis/--values: a sweep needs both"])
        table = run_sweep(config, args.axis, args.values, args.out, jobs=args.jobs)
        print(f"✅ sweep over {args.axis} finished: {len(table)} rows")
        print(table[["value", "method", "rmse", "median_abs_error"]].to_string(index=False))
    elif args.verb == "certify":
        if not args.checkpoint:
            raise ConfigValidationError(["--checkpoint: certify needs a checkpoint"])
        seed = config.seeds[0]
        print(json.dumps(certify_checkpoint(config, args.checkpoint, seed), indent=2, default=str))
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    try:
        return dispatch(args)
    except ConfigValidationError as exc:
        print(f"❌ {exc}", file=sys.stderr)
        return EXIT_INVALID
    except MissingInputsError as exc:
        print(f"❌ {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NumericAbortError as exc:
        print(f"❌ numeric abort: {exc} ({len(exc.trace)} trace rows kept in quarantine)", file=sys.stderr)
        return EXIT_NUMERIC
    except BcrlError as exc:
        print(f"❌ {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
