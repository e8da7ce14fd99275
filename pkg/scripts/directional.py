"""FedAvg vs FLIT vs FLIT+ on FreeSolv at desk scale; writes bundles and a comparison CSV."""
import argparse
from pathlib import Path

from fedchem.desk import ARMS, DESK_SEEDS, run_arms
from fedchem.experiment import compare_runs, write_comparison


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("runs/directional"))
    ap.add_argument("--seeds", type=int, nargs="+", default=list(DESK_SEEDS))
    args = ap.parse_args()

    run_arms(args.out, seeds=args.seeds, arms=ARMS)
    for alpha in sorted({a for _, a in ARMS}):
        paths = sorted(args.out.glob(f"*_a{alpha}/seed*/results.json"))
        if len(paths) < 2:
            continue
        rows = compare_runs(paths)
        csv_path = args.out / f"compare_a{alpha}.csv"
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            write_comparison(rows, fh)
        for r in rows:
            print(f"alpha={alpha} {r['strategy']:9s} median test rmse {r['median']:.4f} (IQR {r['iqr']:.4f})")
        print(f"wrote {csv_path}")


if __name__ == "__main__":
    main()
