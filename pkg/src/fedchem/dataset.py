"""CSV ingestion and labeled graph collections."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .molgraph import FeatureSpec, FeaturizedGraph, MolGraph, SmilesError, featurize, parse_smiles
from .nnet import GraphBatch


class MissingColumn(KeyError):
    pass


class BadLabelValue(ValueError):
    pass


@dataclass(frozen=True)
class DatasetFile:
    path: str
    smiles_column: str = "smiles"
    task_columns: tuple[str, ...] = ("y",)
    task_type: str = "regression"
    metric: str | None = None

    def __post_init__(self):
        if not self.task_columns:
            raise ValueError("need at least one task column")
        if self.task_type not in ("regression", "classification"):
            raise ValueError(f"unknown task_type {self.task_type!r}")

    @property
    def metric_name(self) -> str:
        if self.metric:
            return self.metric
        return "rmse" if self.task_type == "regression" else "roc_auc"


DATA_DIR = Path(__file__).resolve().parents[2] / "data"

PRESETS = {
    "freesolv": DatasetFile(str(DATA_DIR / "FreeSolv.csv"), "smiles", ("expt",)),
    "esol": DatasetFile(str(DATA_DIR / "ESOL.csv"), "smiles",
                        ("measured log solubility in mols per litre",)),
    "lipophilicity": DatasetFile(str(DATA_DIR / "Lipophilicity.csv"), "smiles", ("exp",)),
}


@dataclass
class Reject:
    row: int
    smiles: str
    error: str


@dataclass
class MoleculeDataset:
    spec: DatasetFile
    smiles: list[str]
    graphs: list[MolGraph]
    y: np.ndarray
    mask: np.ndarray
    rejects: list[Reject] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.graphs)


def load_dataset(spec: DatasetFile) -> MoleculeDataset:
    """Parse every row; SMILES failures go to ``rejects`` instead of aborting."""
    with open(spec.path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in (spec.smiles_column, *spec.task_columns):
            if col not in header:
                raise MissingColumn(f"{spec.path}: column {col!r} not in header {header}")
        smiles, graphs, ys, masks, rejects = [], [], [], [], []
        for row_no, row in enumerate(reader, start=2):
            labels, present = [], []
            for col in spec.task_columns:
                cell = (row[col] or "").strip()
                if cell == "":
                    labels.append(0.0)
                    present.append(False)
                    continue
                try:
                    val = float(cell)
                except ValueError:
                    raise BadLabelValue(f"{spec.path}: row {row_no}, column {col!r}: {cell!r}") from None
                if spec.task_type == "classification" and val not in (0.0, 1.0):
                    raise BadLabelValue(f"{spec.path}: row {row_no}, column {col!r}: {cell!r} is not 0/1")
                labels.append(val)
                present.append(True)
            text = row[spec.smiles_column]
            try:
                g = parse_smiles(text)
            except SmilesError as exc:
                rejects.append(Reject(row_no, text, f"{type(exc).__name__}: {exc}"))
                continue
            smiles.append(text)
            graphs.append(g)
            ys.append(labels)
            masks.append(present)
    T = len(spec.task_columns)
    return MoleculeDataset(
        spec, smiles, graphs,
        np.asarray(ys, dtype=np.float64).reshape(-1, T),
        np.asarray(masks, dtype=bool).reshape(-1, T),
        rejects,
    )


@dataclass(frozen=True)
class TargetScaler:
    """Per-task standardization of regression targets (identity for classification)."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, y: np.ndarray, mask: np.ndarray, task_type: str) -> "TargetScaler":
        T = y.shape[1]
        if task_type != "regression":
            return cls(np.zeros(T), np.ones(T))
        mean = np.array([y[mask[:, t], t].mean() if mask[:, t].any() else 0.0 for t in range(T)])
        std = np.array([y[mask[:, t], t].std() if mask[:, t].sum() > 1 else 1.0 for t in range(T)])
        return cls(mean, np.where(std > 0, std, 1.0))

    def transform(self, y: np.ndarray) -> np.ndarray:
        return (y - self.mean) / self.std

    def inverse(self, z: np.ndarray) -> np.ndarray:
        return z * self.std + self.mean


@dataclass
class LabeledGraphs:
    """Featurized molecules with (possibly scaled) labels; ``ids`` are dataset row indices."""

    graphs: list[FeaturizedGraph]
    y: np.ndarray
    mask: np.ndarray
    ids: np.ndarray

    def __len__(self) -> int:
        return len(self.graphs)

    def subset(self, positions: Sequence[int]) -> "LabeledGraphs":
        positions = list(positions)
        return LabeledGraphs(
            [self.graphs[p] for p in positions], self.y[positions], self.mask[positions], self.ids[positions]
        )

    def batch(self, positions: Sequence[int]) -> GraphBatch:
        return GraphBatch.from_graphs([self.graphs[p] for p in positions])

    def chunks(self, size: int = 256):
        for start in range(0, len(self), size):
            yield np.arange(start, min(start + size, len(self)))


def labeled_graphs(ds: MoleculeDataset, indices: Sequence[int], scaler: TargetScaler | None = None,
                   spec: FeatureSpec = FeatureSpec(), feats: list[FeaturizedGraph] | None = None) -> LabeledGraphs:
    idx = np.asarray(list(indices), dtype=np.int64)
    graphs = [feats[i] if feats is not None else featurize(ds.graphs[i], spec) for i in idx]
    y = ds.y[idx]
    if scaler is not None:
        y = scaler.transform(y)
    mask = ds.mask[idx]
    return LabeledGraphs(graphs, np.where(mask, y, 0.0), mask, idx)
