"""Command-line entry point: ``maarcert <command> ...``."""
from __future__ import annotations

import argparse
import logging
import sys

from . import experiments
from .config import load_config, parse_lambdas
from .errors import MaarError


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="maarcert", description="Layerwise certified training and verification.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train per the stage plan and save one checkpoint per stage")
    p.add_argument("--config", required=True)

    p = sub.add_parser("certify", help="certify the test split with a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("sweep-lambda", help="train and certify one model per lambda")
    p.add_argument("--config", required=True)
    p.add_argument("--lambdas", required=True, help="comma-separated, e.g. 2,4,6,8,10")

    p = sub.add_parser("stage-eval", help="CR and LR of every stage checkpoint")
    p.add_argument("--config", required=True)

    p = sub.add_parser("report", help="print every result table under a directory")
    p.add_argument("--in", dest="in_dir", required=True)
    return ap


def run(args) -> str:
    if args.command == "report":
        return experiments.report(args.in_dir)
    cfg = load_config(args.config)
    if args.command == "train":
        out = experiments.run_train(cfg)
        return experiments.report(out["dir"])
    if args.command == "certify":
        out = experiments.run_certify(cfg, args.checkpoint)
    elif args.command == "sweep-lambda":
        out = experiments.run_sweep_lambda(cfg, parse_lambdas(args.lambdas))
    else:
        out = experiments.run_stage_eval(cfg)
    return experiments.report(out["dir"])


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        text = run(args)
    except (MaarError, OSError, ValueError, TypeError) as exc:
        print(f"maarcert: error: {exc}", file=sys.stderr)
        return 1
    sys.stdout.write(text)
    return 0


if __name__ == "__main__":
    sys.exit(main())
