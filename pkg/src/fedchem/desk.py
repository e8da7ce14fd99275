"""Desk-scale FreeSolv setting used for the directional heterogeneity / FLIT+ checks.

Fixed before any comparison was run: 4 clients, 15 rounds, 60 local steps per
round, batch 64, Adam at lr 1e-3, and a small MPNN. Strategy hyperparameters
stay at their defaults (gamma=1, lambda=0.1, epsilon=1e-4, xi=2.5, beta=0.8).
"""
from __future__ import annotations

from pathlib import Path

from .dataset import PRESETS
from .experiment import Prepared, RunConfig, run_experiment
from .fedcore import FedConfig
from .nnet import AdamConfig, MpnnConfig
from .strategies import StrategyConfig

DESK_MODEL = MpnnConfig(mp_layers=2, edge_hidden=8, node_dim=32, head_hidden=32)
DESK_SEEDS = (0, 1, 2, 3, 4)
# (strategy kind, alpha)
ARMS = (("erm", 0.1), ("erm", 1.0), ("flit", 0.1), ("flit_plus", 0.1))


def desk_config(kind: str, alpha: float, seed: int, out_dir: str | Path = "runs/desk",
                max_workers: int = 1) -> RunConfig:
    fed = FedConfig(num_clients=4, comm_rounds=15, local_steps=60, batch_size=64,
                    strategy=StrategyConfig(kind=kind), adam=AdamConfig(lr=1e-3), max_workers=max_workers)
    return RunConfig(dataset=PRESETS["freesolv"], alpha=alpha, fed=fed, model=DESK_MODEL,
                     out_dir=str(out_dir)).with_seed(seed)


def run_arms(out_root, seeds=DESK_SEEDS, arms=ARMS, prepared: Prepared | None = None,
             log=print) -> dict[tuple[str, float], list[dict]]:
    """Run every (arm, seed); results bundles land in ``out_root/<kind>_a<alpha>/seed<k>``."""
    prepared = prepared or Prepared.from_spec(PRESETS["freesolv"])
    out = {}
    for kind, alpha in arms:
        runs = []
        for s in seeds:
            cfg = desk_config(kind, alpha, s, Path(out_root) / f"{kind}_a{alpha}" / f"seed{s}")
            res = run_experiment(cfg, prepared)
            if log:
                log(f"{kind:9s} alpha={alpha:<4} seed={s} test_rmse={res['test_metric']:.4f} "
                    f"best_round={res['best_round']} ({res['metadata']['elapsed_seconds']:.0f}s)")
            runs.append(res)
        out[(kind, alpha)] = runs
    return out
