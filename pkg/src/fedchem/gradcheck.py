"""Central finite-difference checks of every client objective's parameter gradient."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .molgraph import FeatureSpec, featurize, parse_smiles
from .nnet import GraphBatch, MpnnConfig, forward, init_params, relu_margin
from .strategies import KINDS, GlobalCache, ReweightState, StrategyConfig, local_objective

# heavy-atom counts 2..8
SMALL_SMILES = (
    "CCO", "CC(=O)O", "c1ccccc1", "C1CCCCC1", "CCN(CC)CC", "OC(=O)c1ccccc1", "C#N",
    "ClC(Cl)Cl", "CC(C)=O", "c1ccncc1", "O=C1CCCC1", "NC(=O)N", "CCOC(C)=O", "Cc1ccco1",
    "C1=CC=CN1", "CS(C)=O", "FC(F)(F)Br", "CCCCCCCC", "OCC(O)CO", "c1ccsc1",
)

SMALL_MODEL = MpnnConfig(mp_layers=2, edge_hidden=5, node_dim=6, head_hidden=6)
VAT_EPSILON = 0.3  # large enough that the discrepancy term is not lost in roundoff


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-5) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


@dataclass
class CheckResult:
    kind: str
    task_type: str
    max_rel_error: float
    cases: int
    redraws: int


def _case(rng, cfg: MpnnConfig, feats):
    n = int(rng.integers(1, 4))
    graphs = [feats[i] for i in rng.choice(len(feats), size=n, replace=False)]
    batch = GraphBatch.from_graphs(graphs)
    T = cfg.task_count
    if cfg.task_type == "regression":
        y = rng.standard_normal((n, T))
    else:
        y = rng.integers(0, 2, size=(n, T)).astype(np.float64)
    mask = rng.random((n, T)) < 0.8
    mask[0, 0] = True
    return batch, y, mask


def check_strategy(kind: str, task_type: str = "regression", cases: int = 20, coords: int = 24,
                   h: float = 1e-5, seed: int = 0, cfg: MpnnConfig | None = None,
                   margin: float = 1e-4) -> CheckResult:
    """Max relative error between analytic and finite-difference gradients over random cases.

    Sample weights and r_adv are pinned at the base point, matching how the
    objective treats them as constants in backprop. Cases with a ReLU input
    closer than ``margin`` to its kink are redrawn.
    """
    cfg = cfg or replace(SMALL_MODEL, task_count=2 if task_type == "classification" else 1,
                         task_type=task_type)
    strategy = StrategyConfig(kind=kind, gamma=1.5, mu=0.3, lam=0.7, vat_weight=0.5, epsilon=VAT_EPSILON)
    rng = np.random.default_rng([seed, KINDS.index(kind), task_type == "classification"])
    feats = [featurize(parse_smiles(s), FeatureSpec()) for s in SMALL_SMILES]
    worst, done, redraws = 0.0, 0, 0
    while done < cases:
        params = init_params(cfg, rng)
        global_params = params.with_values(params.values + 0.1 * rng.standard_normal(len(params)))
        batch, y, mask = _case(rng, cfg, feats)
        ids = np.arange(batch.n_graphs)
        cache = GlobalCache(ids, rng.uniform(0.1, 2.0, batch.n_graphs), rng.uniform(0.0, 0.5, batch.n_graphs))
        state = ReweightState(float(rng.uniform(0.5, 2.0)), bool(rng.integers(0, 2)))
        kw = dict(ids=ids, global_params=global_params, cache=cache, state=state)
        base = local_objective(params, cfg, batch, y, mask, strategy, rng=rng, **kw)
        _, fc = forward(params, cfg, batch)
        margins = [relu_margin(fc)]
        if base.r_adv is not None:
            _, pc = forward(params, cfg, batch, batch.nodes + strategy.xi * base.r_adv)
            margins.append(relu_margin(pc))
        if min(margins) < margin:
            redraws += 1
            continue
        kw.update(weights=base.weights, r_adv=base.r_adv)

        def f(v):
            return local_objective(params.with_values(v), cfg, batch, y, mask, strategy, **kw).value

        pick = rng.choice(len(params), size=min(coords, len(params)), replace=False)
        numeric = np.empty(len(pick))
        for k, j in enumerate(pick):
            up, dn = params.values.copy(), params.values.copy()
            up[j] += h
            dn[j] -= h
            numeric[k] = (f(up) - f(dn)) / (2 * h)
        worst = max(worst, float(rel_error(base.grad.values[pick], numeric).max()))
        done += 1
    return CheckResult(kind, task_type, worst, cases, redraws)


def run_suite(cases: int = 20, coords: int = 24, seed: int = 0,
              task_types=("regression", "classification")) -> list[CheckResult]:
    return [check_strategy(k, t, cases, coords, seed=seed) for t in task_types for k in KINDS]
