"""Command-line entry point: ``qacq run`` and ``qacq verify``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import QacqError
from .harness import RunConfig, emit_results, run_trials
from .verification import CHECKS, run_battery

# CLI flag -> RunConfig field
_OVERRIDES = {
    "task": "task",
    "dim": "dim",
    "q": "q",
    "acq": "acq",
    "maximizer": "maximizer",
    "parallel_mode": "parallel_mode",
    "inner_budget": "inner_budget",
    "budget_mode": "budget_mode",
    "trials": "n_trials",
    "iters": "n_iterations",
    "seed": "seed",
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qacq", description="Batch Bayesian optimization with MC acquisitions.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run BO trials and write a CSV plus JSON metadata")
    run.add_argument("--config", type=Path, help="JSON file with RunConfig fields")
    run.add_argument("--task")
    run.add_argument("--dim", type=int)
    run.add_argument("--q", type=int)
    run.add_argument("--acq", choices=["ei", "pi", "sr", "ucb", "es", "kg"])
    run.add_argument("--maximizer", choices=["grad", "rs"])
    run.add_argument("--parallel-mode", choices=["greedy", "joint", "incremental"])
    run.add_argument("--inner-budget", type=float)
    run.add_argument("--budget-mode", choices=["evals", "seconds"])
    run.add_argument("--trials", type=int)
    run.add_argument("--iters", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--out", type=Path, default=Path("results.csv"))
    run.add_argument("--print-config", action="store_true", help="print the resolved config and exit")

    ver = sub.add_parser("verify", help="run oracle checks and print JSON lines")
    ver.add_argument("--check", action="append", choices=sorted(CHECKS))
    ver.add_argument("--seed", type=int, default=0)
    return parser


def _resolve_config(args) -> RunConfig:
    base = {}
    if args.config is not None:
        base = json.loads(args.config.read_text())
        if not isinstance(base, dict):
            raise SystemExit("config must be a JSON object")
    cfg = RunConfig.from_dict(base)
    updates = {field: getattr(args, flag) for flag, field in _OVERRIDES.items() if getattr(args, flag) is not None}
    if updates:
        cfg = RunConfig.from_dict({**cfg.to_dict(), **updates})
    return cfg


def _cmd_run(args) -> int:
    cfg = _resolve_config(args)
    if args.print_config:
        print(cfg.to_json())
        return 0
    if not args.out.parent.resolve().is_dir():
        raise FileNotFoundError(f"output directory {args.out.parent} does not exist")
    records = run_trials(cfg)
    csv_path, meta_path = emit_results(records, args.out, cfg)
    aborted = sum(r.status != "ok" for r in records)
    print(f"wrote {csv_path} and {meta_path} ({len(records)} trials, {aborted} aborted)")
    return 0


def _cmd_verify(args) -> int:
    reports = run_battery(args.check, args.seed)
    for r in reports:
        print(json.dumps(r.to_dict(), sort_keys=True))
    return 0 if all(r.passed for r in reports) else 1


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        return _cmd_verify(args)
    except (QacqError, OSError) as exc:
        print(f"qacq: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
