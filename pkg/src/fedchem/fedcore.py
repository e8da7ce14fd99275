"""In-process FedAvg federation: broadcast, client updates, weighted aggregation."""
from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dataset import LabeledGraphs, TargetScaler
from .metrics import MetricReport, evaluate, is_better
from .nnet import (
    AdamConfig,
    MpnnConfig,
    ParamVector,
    check_finite,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
    sigmoid,
)
from .strategies import ClientResult, StrategyConfig, TrainConfig, client_seed, client_update


class LayoutMismatch(ValueError):
    pass


@dataclass(frozen=True)
class FedConfig:
    num_clients: int = 4
    comm_rounds: int = 30
    local_steps: int = 10
    batch_size: int = 64
    client_fraction: float = 1.0
    run_seed: int = 0
    strategy: StrategyConfig = StrategyConfig()
    adam: AdamConfig = AdamConfig()
    max_workers: int = 1

    def __post_init__(self):
        if self.num_clients < 1 or self.comm_rounds < 1 or self.local_steps < 0 or self.batch_size < 1:
            raise ValueError(f"invalid federation sizes: {self}")
        if not 0 < self.client_fraction <= 1:
            raise ValueError("client_fraction must lie in (0, 1]")

    @property
    def train(self) -> TrainConfig:
        return TrainConfig(self.local_steps, self.batch_size, self.adam)

    @property
    def clients_per_round(self) -> int:
        return math.ceil(self.client_fraction * self.num_clients)


def local_steps_for(total_steps: int, comm_rounds: int) -> int:
    """Per-round local steps when a total step budget is split over the rounds."""
    return total_steps // comm_rounds


def fed_avg_aggregate(models: Sequence[tuple[ParamVector, int]]) -> ParamVector:
    """Sum of (n_l / sum n) * theta_l, accumulated in the given (client id) order."""
    if not models:
        raise ValueError("nothing to aggregate")
    layout = models[0][0].layout
    for p, n in models:
        if p.layout != layout:
            raise LayoutMismatch("client parameter layouts differ")
        if n <= 0:
            raise ValueError(f"client sample count must be > 0, got {n}")
    total = sum(n for _, n in models)
    acc = (models[0][1] / total) * models[0][0].values
    for p, n in models[1:]:
        acc = acc + (n / total) * p.values
    return ParamVector(acc, layout)


@dataclass
class EvalSet:
    data: LabeledGraphs
    scaler: TargetScaler
    metric: str


def predict(params: ParamVector, cfg: MpnnConfig, data: LabeledGraphs, chunk: int = 256) -> np.ndarray:
    outs = [forward(params, cfg, data.batch(pos))[0].raw for pos in data.chunks(chunk)]
    return np.concatenate(outs, axis=0)


def evaluate_params(params: ParamVector, cfg: MpnnConfig, ev: EvalSet) -> MetricReport:
    raw = predict(params, cfg, ev.data)
    if cfg.task_type == "classification":
        return evaluate(ev.metric, sigmoid(raw), ev.data.y, ev.data.mask)
    return evaluate(ev.metric, ev.scaler.inverse(raw), ev.scaler.inverse(ev.data.y), ev.data.mask)


@dataclass
class RoundRecord:
    round: int
    clients: list[int]
    client_losses: list[float]
    val_metric: float
    duration: float = field(default=0.0, compare=False)

    def payload(self) -> dict:
        """Deterministic part of the record (no wall-clock)."""
        return {"round": self.round, "clients": self.clients,
                "client_losses": self.client_losses, "val_metric": self.val_metric}


@dataclass
class FederationResult:
    params: ParamVector
    history: list[RoundRecord]
    best_round: int | None
    best_val: float | None
    best_params: ParamVector | None
    diagnostics: list[dict] = field(default_factory=list)


def select_clients(cfg: FedConfig, rnd: int) -> list[int]:
    m = cfg.clients_per_round
    if m >= cfg.num_clients:
        return list(range(cfg.num_clients))
    rng = np.random.default_rng([cfg.run_seed, 0x5E1EC7, rnd])
    return sorted(int(c) for c in rng.choice(cfg.num_clients, size=m, replace=False))


def server_init(cfg: FedConfig, model_cfg: MpnnConfig) -> ParamVector:
    return init_params(model_cfg, np.random.default_rng([cfg.run_seed, 0x1417]))


def run_round(global_params: ParamVector, cfg: FedConfig, model_cfg: MpnnConfig,
              clients: Sequence[LabeledGraphs], rnd: int) -> tuple[ParamVector, list[int], list[ClientResult]]:
    chosen = select_clients(cfg, rnd)
    snapshot = global_params.copy()
    snapshot.values.flags.writeable = False

    def job(cid: int) -> ClientResult:
        return client_update(snapshot, model_cfg, clients[cid], cfg.strategy, cfg.train,
                             client_seed(cfg.run_seed, cid, rnd), client_id=cid, rnd=rnd)

    if cfg.max_workers > 1 and len(chosen) > 1:
        with ThreadPoolExecutor(max_workers=cfg.max_workers) as pool:
            results = list(pool.map(job, chosen))
    else:
        results = [job(c) for c in chosen]
    new = fed_avg_aggregate([(r.params, len(clients[c])) for c, r in zip(chosen, results)])
    check_finite(f"aggregated parameters (round {rnd})", new.values)
    return new, chosen, results


def run_federation(cfg: FedConfig, model_cfg: MpnnConfig, clients: Sequence[LabeledGraphs],
                   valid: EvalSet, *, initial: ParamVector | None = None, start_round: int = 1,
                   on_round: Callable[[RoundRecord, ParamVector, list[ClientResult]], None] | None = None,
                   best: tuple[int, float, ParamVector] | None = None) -> FederationResult:
    """Run rounds ``start_round..comm_rounds``; ``initial``/``best`` resume from a checkpoint."""
    if len(clients) != cfg.num_clients:
        raise ValueError(f"{len(clients)} client datasets for num_clients={cfg.num_clients}")
    for cid, c in enumerate(clients):
        if len(c) == 0:
            raise ValueError(f"client {cid} has an empty dataset")
    params = server_init(cfg, model_cfg) if initial is None else initial
    best_round, best_val, best_params = best if best is not None else (None, None, None)
    history, diagnostics = [], []
    for rnd in range(start_round, cfg.comm_rounds + 1):
        t0 = time.perf_counter()
        params, chosen, results = run_round(params, cfg, model_cfg, clients, rnd)
        report = evaluate_params(params, model_cfg, valid)
        rec = RoundRecord(rnd, chosen, [r.loss_after for r in results], report.aggregate,
                          time.perf_counter() - t0)
        history.append(rec)
        diagnostics.extend(r.diagnostics for r in results)
        if is_better(valid.metric, report.aggregate, best_val):
            best_round, best_val, best_params = rnd, report.aggregate, params
        if on_round is not None:
            on_round(rec, params, results)
    return FederationResult(params, history, best_round, best_val, best_params, diagnostics)


def checkpoint_round(params: ParamVector, model_cfg: MpnnConfig, rnd: int, path, **meta):
    return save_checkpoint(path, params, model_cfg, {"round": rnd, **meta})


def load_round_checkpoint(path) -> tuple[ParamVector, MpnnConfig, int, dict]:
    params, cfg, meta = load_checkpoint(path)
    return params, cfg, int(meta.get("round", 0)), meta
