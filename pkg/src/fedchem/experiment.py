"""End-to-end runs: load, scaffold, partition, federate, and write a results bundle."""
from __future__ import annotations

import csv
import dataclasses
import itertools
import json
import os
import time
import typing
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import PRESETS, DatasetFile, LabeledGraphs, MoleculeDataset, TargetScaler, labeled_graphs, load_dataset
from .metrics import is_better
from .fedcore import EvalSet, FedConfig, checkpoint_round, evaluate_params, run_federation
from .molgraph import FeatureSpec, FeaturizedGraph, featurize
from .nnet import MpnnConfig
from .partition import ClientPartition, SplitSpec, build_partition, split_dataset
from .scaffold import ScaffoldGroups, group_by_scaffold, scaffold_key, write_scaffold_manifest
from .strategies import StrategyConfig


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage


class MixedDatasets(ValueError):
    pass


# hyperparameters searched per strategy kind in grid mode
GRID_KEYS = {
    "erm": (),
    "prox": ("mu",),
    "focal": ("gamma",),
    "vat": ("vat_weight",),
    "flit": ("gamma",),
    "flit_plus": ("gamma", "lam"),
}


@dataclass(frozen=True)
class GridSpec:
    gamma: tuple[float, ...] = (0.5, 1.0, 2.0)
    lam: tuple[float, ...] = (0.01, 0.1, 1.0)
    mu: tuple[float, ...] = (0.001, 0.01, 0.1, 1.0, 10.0)
    vat_weight: tuple[float, ...] = (0.01, 0.1, 1.0)

    def __post_init__(self):
        for name in ("gamma", "lam", "mu", "vat_weight"):
            if not getattr(self, name):
                raise ValueError(f"grid for {name} is empty")

    def points(self, strategy: StrategyConfig) -> list[StrategyConfig]:
        keys = GRID_KEYS[strategy.kind]
        combos = itertools.product(*(getattr(self, k) for k in keys))
        return [replace(strategy, **dict(zip(keys, c))) for c in combos]


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetFile = PRESETS["freesolv"]
    split: SplitSpec = SplitSpec()
    alpha: float = 0.1
    fed: FedConfig = FedConfig()
    model: MpnnConfig = MpnnConfig()
    out_dir: str = "runs/default"
    grid: GridSpec | None = None
    # when set, local_steps is derived as total_steps // comm_rounds
    total_steps: int | None = None

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if self.model.task_type != self.dataset.task_type:
            raise ValueError("model.task_type must match dataset.task_type")
        if self.model.task_count != len(self.dataset.task_columns):
            raise ValueError("model.task_count must equal the number of task columns")
        if self.total_steps is not None and self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")

    @property
    def strategy(self) -> StrategyConfig:
        return self.fed.strategy

    def resolved(self) -> "RunConfig":
        """Apply ``total_steps`` to the per-round step count."""
        if self.total_steps is None:
            return self
        return replace(self, fed=replace(self.fed, local_steps=self.total_steps // self.fed.comm_rounds))

    def with_seed(self, seed: int) -> "RunConfig":
        """One seed drives the split, the partition and the federation."""
        return replace(self, split=replace(self.split, seed=seed), fed=replace(self.fed, run_seed=seed))

    @property
    def seed(self) -> int:
        return self.fed.run_seed

    def to_json(self) -> dict:
        return _plain(dataclasses.asdict(self))

    @classmethod
    def from_json(cls, payload: dict) -> "RunConfig":
        return _build(cls, payload)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True, indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, payload):
    """Rebuild a (nested) frozen dataclass from plain JSON; missing keys take defaults."""
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(payload) - known
    if unknown:
        raise ValueError(f"{cls.__name__}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in payload.items():
        kwargs[name] = _coerce(hints[name], value)
    return cls(**kwargs)


def _coerce(tp, value):
    if value is None:
        return None
    args = typing.get_args(tp)
    origin = typing.get_origin(tp)
    if origin in (typing.Union, getattr(__import__("types"), "UnionType", None)):
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value)
    if origin is tuple:
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v) for v in value)
        return tuple(_coerce(a, v) for a, v in zip(args, value))
    return value


# ---------------------------------------------------------------- pipeline

@dataclass
class Prepared:
    """Parsed dataset plus per-molecule features and scaffold keys; reusable across runs."""

    dataset: MoleculeDataset
    feats: list[FeaturizedGraph]
    keys: list

    @classmethod
    def from_spec(cls, spec: DatasetFile, features: FeatureSpec = FeatureSpec()) -> "Prepared":
        ds = load_dataset(spec)
        return cls(ds, [featurize(g, features) for g in ds.graphs], [scaffold_key(g) for g in ds.graphs])


@dataclass
class Pipeline:
    config: RunConfig
    train: list[int]
    valid: list[int]
    test: list[int]
    groups: ScaffoldGroups
    partition: ClientPartition
    scaler: TargetScaler
    clients: list[LabeledGraphs]
    valid_set: EvalSet
    test_set: EvalSet


def _stage(name):
    def wrap(fn):
        def inner(*a, **kw):
            try:
                return fn(*a, **kw)
            except StageError:
                raise
            except Exception as exc:  # noqa: BLE001 - rewrapped with stage context
                raise StageError(name, exc) from exc
        return inner
    return wrap


def build_pipeline(config: RunConfig, prepared: Prepared) -> Pipeline:
    config = config.resolved()
    ds = prepared.dataset
    train, valid, test = _stage("split")(split_dataset)(len(ds), config.split)
    groups = _stage("scaffold")(group_by_scaffold)(train, keys=prepared.keys)
    part = _stage("partition")(build_partition)(groups, config.fed.num_clients, config.alpha, config.seed)
    scaler = TargetScaler.fit(ds.y[train], ds.mask[train], config.dataset.task_type)
    lg = lambda idx: labeled_graphs(ds, idx, scaler, feats=prepared.feats)  # noqa: E731
    clients = [lg(a) for a in part.assignments]
    metric = config.dataset.metric_name
    return Pipeline(config, train, valid, test, groups, part, scaler, clients,
                    EvalSet(lg(valid), scaler, metric), EvalSet(lg(test), scaler, metric))


def effective_workers(requested: int) -> int:
    cap = os.environ.get("FEDCHEM_THREADS")
    if cap:
        return max(1, min(requested, int(cap)))
    return max(1, requested)


def _federate(pipe: Pipeline, out: Path | None):
    cfg = pipe.config
    fed = replace(cfg.fed, max_workers=effective_workers(cfg.fed.max_workers))
    diag_fh = open(out / "diagnostics.jsonl", "w", encoding="utf-8") if out else None
    try:
        def on_round(rec, params, results):
            if diag_fh:
                for r in results:
                    diag_fh.write(json.dumps(r.diagnostics, sort_keys=True) + "\n")

        result = run_federation(fed, cfg.model, pipe.clients, pipe.valid_set, on_round=on_round)
    finally:
        if diag_fh:
            diag_fh.close()
    return result


def _run_single(pipe: Pipeline, out: Path | None) -> dict:
    cfg = pipe.config
    result = _stage("federation")(_federate)(pipe, out)
    test_best = evaluate_params(result.best_params, cfg.model, pipe.test_set)
    test_final = evaluate_params(result.params, cfg.model, pipe.test_set)
    if out:
        checkpoint_round(result.params, cfg.model, cfg.fed.comm_rounds, out / "final.ckpt", kind="final")
        checkpoint_round(result.best_params, cfg.model, result.best_round, out / "best.ckpt", kind="best")
        with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["round", "val_metric", "mean_client_loss"])
            for rec in result.history:
                w.writerow([rec.round, repr(rec.val_metric), repr(float(np.mean(rec.client_losses)))])
    return {
        "history": [r.payload() for r in result.history],
        "best_round": result.best_round,
        "best_val_metric": result.best_val,
        "test_metric": test_best.aggregate,
        "test_report": test_best.to_json(),
        "final_test_metric": test_final.aggregate,
        "durations": [r.duration for r in result.history],
    }


def run_experiment(config: RunConfig, prepared: Prepared | None = None, write: bool = True) -> dict:
    """Run one configuration (or its grid) and write the results bundle to ``config.out_dir``.

    Returns the results dict; everything outside ``metadata`` is a pure
    function of the input files, config and seed.
    """
    started = datetime.now(timezone.utc).isoformat()
    t0 = time.perf_counter()
    config = config.resolved()
    prepared = prepared or _stage("load")(Prepared.from_spec)(config.dataset)
    pipe = build_pipeline(config, prepared)
    out = Path(config.out_dir) if write else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        pipe.partition.save(out / "partition.json")
        write_scaffold_manifest(out / "scaffold_manifest.csv", pipe.train, [prepared.keys[i] for i in pipe.train])
        write_rejects(out / "rejects.csv", prepared.dataset)

    grid_rows = None
    if config.grid is None:
        single = _run_single(pipe, out)
        chosen = config.strategy
    else:
        grid_rows, best = [], None
        for k, strat in enumerate(config.grid.points(config.strategy)):
            sub = replace(pipe, config=replace(config, fed=replace(config.fed, strategy=strat)))
            sub_out = out / f"grid_{k:02d}" if out else None
            if sub_out:
                sub_out.mkdir(exist_ok=True)
            res = _run_single(sub, sub_out)
            grid_rows.append({"point": k, "strategy": dataclasses.asdict(strat),
                              "best_val_metric": res["best_val_metric"], "test_metric": res["test_metric"]})
            if best is None or is_better(config.dataset.metric_name, res["best_val_metric"], best[2]["best_val_metric"]):
                best = (k, strat, res)
        k, chosen, single = best
        if out:
            for name in ("final.ckpt", "final.ckpt.json", "best.ckpt", "best.ckpt.json"):
                (out / name).write_bytes((out / f"grid_{k:02d}" / name).read_bytes())

    durations = single.pop("durations")
    results = {
        # out_dir lives in metadata so runs written to different places stay comparable
        "config": {k: v for k, v in config.to_json().items() if k != "out_dir"},
        "seed": config.seed,
        "dataset": Path(config.dataset.path).name,
        "strategy": config.strategy.kind,
        "selected_strategy": dataclasses.asdict(chosen),
        "alpha": config.alpha,
        "metric": config.dataset.metric_name,
        "heterogeneity_index": pipe.partition.heterogeneity,
        "client_sizes": pipe.partition.sizes,
        "split_sizes": [len(pipe.train), len(pipe.valid), len(pipe.test)],
        "num_rejects": len(prepared.dataset.rejects),
        "grid": grid_rows,
        **single,
        "metadata": {
            "out_dir": str(config.out_dir) if write else None,
            "started": started,
            "finished": datetime.now(timezone.utc).isoformat(),
            "elapsed_seconds": time.perf_counter() - t0,
            "round_durations": durations,
        },
    }
    if out:
        (out / "results.json").write_text(results_json(results), encoding="utf-8")
    return results


def results_json(results: dict) -> str:
    return json.dumps(_plain(results), sort_keys=True, indent=2) + "\n"


def payload_bytes(results: dict) -> bytes:
    """Results without the wall-clock ``metadata`` section, as comparable bytes."""
    return results_json({k: v for k, v in results.items() if k != "metadata"}).encode("utf-8")


def write_rejects(path, ds: MoleculeDataset) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "smiles", "error"])
        for r in ds.rejects:
            w.writerow([r.row, r.smiles, r.error])


def partition_only(config: RunConfig, out_dir, prepared: Prepared | None = None) -> ClientPartition:
    config = config.resolved()
    prepared = prepared or _stage("load")(Prepared.from_spec)(config.dataset)
    pipe = build_pipeline(config, prepared)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pipe.partition.save(out / "partition.json")
    write_scaffold_manifest(out / "scaffold_manifest.csv", pipe.train, [prepared.keys[i] for i in pipe.train])
    write_rejects(out / "rejects.csv", prepared.dataset)
    return pipe.partition


# ---------------------------------------------------------------- comparison

COMPARE_COLUMNS = ["strategy", "alpha", "n_runs", "seeds", "median", "q25", "q75", "iqr", "metric"]


def compare_runs(paths: Sequence) -> list[dict]:
    """One summary row per (strategy, alpha) arm, seeds pooled; ordered by strategy then alpha."""
    if len(paths) < 2:
        raise ValueError("compare_runs needs at least two result files")
    runs = [json.loads(Path(p).read_text(encoding="utf-8")) for p in paths]
    datasets = {r["dataset"] for r in runs}
    if len(datasets) > 1:
        raise MixedDatasets(f"results span several datasets: {sorted(datasets)}")
    arms: dict = {}
    for r in runs:
        arms.setdefault((r["strategy"], r["alpha"]), []).append(r)
    rows = []
    for (strategy, alpha), group in sorted(arms.items()):
        vals = np.array([g["test_metric"] for g in group], dtype=np.float64)
        q25, med, q75 = np.percentile(vals, [25, 50, 75])
        rows.append({
            "strategy": strategy, "alpha": alpha, "n_runs": len(group),
            "seeds": ";".join(str(g["seed"]) for g in sorted(group, key=lambda g: g["seed"])),
            "median": float(med), "q25": float(q25), "q75": float(q75), "iqr": float(q75 - q25),
            "metric": group[0]["metric"],
        })
    return rows


def write_comparison(rows: list[dict], fh) -> None:
    w = csv.DictWriter(fh, fieldnames=COMPARE_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def read_comparison(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
