"""Command line: run, partition, compare, gradcheck."""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .experiment import RunConfig, StageError, compare_runs, partition_only, run_experiment, write_comparison


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out is not None:
        cfg = replace(cfg, out_dir=args.out)
    return cfg


def cmd_run(args) -> int:
    cfg = _config(args)
    res = run_experiment(cfg)
    print(f"{res['strategy']} alpha={res['alpha']} seed={res['seed']}: "
          f"best round {res['best_round']} val {res['metric']}={res['best_val_metric']:.4f} "
          f"test {res['metric']}={res['test_metric']:.4f} -> {cfg.out_dir}")
    return 0


def cmd_partition(args) -> int:
    cfg = _config(args)
    part = partition_only(cfg, cfg.out_dir)
    print(f"sizes={part.sizes} heterogeneity_index={part.heterogeneity:.4f} -> {cfg.out_dir}")
    return 0


def cmd_compare(args) -> int:
    rows = compare_runs(args.inputs)
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            write_comparison(rows, fh)
    else:
        write_comparison(rows, sys.stdout)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    worst = 0.0
    for r in run_suite(cases=args.cases, coords=args.coords, seed=args.seed or 0):
        worst = max(worst, r.max_rel_error)
        status = "ok" if r.max_rel_error < args.tol else "FAIL"
        print(f"{r.kind:10s} {r.task_type:15s} max_rel_error={r.max_rel_error:.2e} redraws={r.redraws} {status}")
    return 0 if worst < args.tol else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedchem", description="Heterogeneous federated molecular property prediction.")
    sub = p.add_subparsers(dest="verb", required=True)

    for name, fn, help_ in (("run", cmd_run, "run one experiment (or grid) and write a results bundle"),
                            ("partition", cmd_partition, "write the client partition and scaffold manifests only")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", type=Path, help="RunConfig JSON (defaults if omitted)")
        s.add_argument("--seed", type=int, help="overrides split, partition and federation seeds")
        s.add_argument("--out", help="output directory")
        s.set_defaults(fn=fn)

    s = sub.add_parser("compare", help="summarize results JSON files per (strategy, alpha)")
    s.add_argument("--inputs", nargs="+", required=True)
    s.add_argument("--out", help="CSV path (stdout if omitted)")
    s.set_defaults(fn=cmd_compare)

    s = sub.add_parser("gradcheck", help="finite-difference check of every strategy objective")
    s.add_argument("--cases", type=int, default=20)
    s.add_argument("--coords", type=int, default=24)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tol", type=float, default=1e-4)
    s.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except StageError as exc:
        print(json.dumps({"error": str(exc), "stage": exc.stage}), file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(json.dumps({"error": f"{type(exc).__name__}: {exc}"}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
