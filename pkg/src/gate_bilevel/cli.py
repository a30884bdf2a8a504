"""Command line entry point: ``gate-bilevel <verb> [options]``.

Exit codes: 0 success, 2 configuration error, 3 divergence, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import harness
from .bilevel import DivergenceError
from .config import ConfigError, load_config
from .data import DataFormatError
from .runstore import CheckpointError

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gate-bilevel", description="Multi-task regression with learned transfer ratios.")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", required=True, help="YAML run configuration")
            sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("train", help="train one configuration")
    common(sp)
    sp.add_argument("--fixed-lambda", type=float, help="disable the outer loop and hold every λ at X")
    sp.add_argument("--resume", help="checkpoint file to resume from")
    sp.add_argument("--stop-after", type=int, help="stop once this many epochs have completed")

    sp = sub.add_parser("grid", help="fixed symmetric λ grid search")
    common(sp)
    sp.add_argument("--workers", type=int, default=1)

    sp = sub.add_parser("compare", help="fixed-λ baseline against bi-level training")
    common(sp)
    sp.add_argument("--seeds", type=int, nargs="+", help="seeds to run (default: the config seed)")

    sp = sub.add_parser("lambda-report", help="λ trajectory diagnostics for a finished run")
    sp.add_argument("run", help="run directory containing lambda.csv")
    sp.add_argument("--threshold", type=float, default=0.1)
    sp.add_argument("--out", help="output directory (default: the run directory)")

    sp = sub.add_parser("curves", help="merge validation curves of several runs")
    sp.add_argument("runs", nargs="+", help="run directories")
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("synth", help="write a synthetic dataset to disk")
    common(sp)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _dispatch(args) -> None:
    if args.verb == "lambda-report":
        print(json.dumps(harness.report_lambda(args.run, args.threshold, args.out), sort_keys=True))
        return
    if args.verb == "curves":
        print(harness.emit_curves(args.runs, args.out))
        return
    cfg = harness.with_overrides(load_config(args.config), seed=args.seed)
    if args.verb == "train":
        cfg = harness.with_overrides(cfg, fixed_lambda=args.fixed_lambda)
        tr = harness.run_train(cfg, args.out, resume=args.resume, stop_after=args.stop_after)
        print(json.dumps(tr.history[-1].val_rmse, sort_keys=True))
    elif args.verb == "grid":
        res = harness.run_grid(cfg, args.out, workers=args.workers)
        print(json.dumps({"best_lambda": res.rows[res.best]["lambda"], "spread": res.spread}))
    elif args.verb == "compare":
        rep = harness.run_compare(cfg, args.seeds or [cfg.seed], args.out)
        print(json.dumps({"improved": rep.improved, "n_tasks": len(rep.tasks),
                          "avg_rmse_ratio": rep.ratio_mean_of_ratios}))
    elif args.verb == "synth":
        for path in harness.write_synthetic(cfg, args.out):
            print(path)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, CheckpointError, DataFormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
