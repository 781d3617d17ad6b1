"""Command-line entry point: ``flexattn {selftest,cost,train,ablate,gen}``.

Exit codes: 0 success, 1 a test or run failed, 2 bad configuration.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .errors import ConfigError
from .bench import report, runs
from .bench.train import RunConfig, TrainingDiverged

COMMANDS = ("selftest", "cost", "train", "ablate", "gen")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flexattn", description="Hierarchical-attention toolkit and benchmarks")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=Path, help="JSON RunConfig; defaults are used when omitted")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--out", type=Path, default=Path("out") / name, help="output directory")
        sp.add_argument("--quiet", action="store_true")
    return p


def load_config(args) -> RunConfig:
    rc = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        rc = replace(rc, seed=args.seed)
    return rc


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    log = None if args.quiet else (lambda msg: print(msg, flush=True))
    try:
        rc = load_config(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    try:
        if args.command == "selftest":
            doc = runs.run_selftest_report(rc, args.out)
            for s in doc["metrics"]["suites"]:
                if log:
                    log(f"{'PASS' if s['passed'] else 'FAIL'}  {s['name']:<20} {s['cases']:>5} cases  {s['detail']}")
            return 0 if doc["metrics"]["all_passed"] else 1
        if args.command == "cost":
            runs.run_cost(rc, args.out)
        elif args.command == "train":
            doc = runs.run_train(rc, args.out, log=log)
            if log:
                log(f"final accuracy {doc['metrics']['final_accuracy']:.3f}")
        elif args.command == "ablate":
            runs.run_ablate(rc, args.out, log=log)
        elif args.command == "gen":
            runs.run_gen(rc, args.out)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except TrainingDiverged as e:
        report.write_json(args.out, e.report)
        print(f"training diverged at step {e.step}", file=sys.stderr)
        return 1
    if log:
        log(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
