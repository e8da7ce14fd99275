"""RMSE, MAE and rank-based ROC-AUC with missing-label masks and multi-task averaging."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata


class EmptyMask(ValueError):
    pass


class DegenerateTask(ValueError):
    """Evaluated labels hold a single class; AUC is undefined."""


def _masked(preds, targets, mask):
    preds = np.asarray(preds, dtype=np.float64).ravel()
    targets = np.asarray(targets, dtype=np.float64).ravel()
    mask = np.ones(preds.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).ravel()
    if not mask.any():
        raise EmptyMask("no unmasked pairs")
    return preds[mask], targets[mask]


def rmse(preds, targets, mask=None) -> float:
    p, t = _masked(preds, targets, mask)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def mae(preds, targets, mask=None) -> float:
    p, t = _masked(preds, targets, mask)
    return float(np.mean(np.abs(p - t)))


def roc_auc(scores, labels, mask=None) -> float:
    """Mann-Whitney AUC with average ranks for ties."""
    s, y = _masked(scores, labels, mask)
    pos = y > 0.5
    n_pos = int(pos.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateTask(f"{n_pos} positives / {n_neg} negatives")
    ranks = rankdata(s, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


METRICS = {"rmse": rmse, "mae": mae, "roc_auc": roc_auc}
HIGHER_IS_BETTER = {"rmse": False, "mae": False, "roc_auc": True}


@dataclass(frozen=True)
class MetricReport:
    name: str
    per_task: tuple[float | None, ...]
    aggregate: float
    skipped: int

    def to_json(self) -> dict:
        return {"name": self.name, "per_task": list(self.per_task),
                "aggregate": self.aggregate, "skipped": self.skipped}


def evaluate(name: str, preds: np.ndarray, targets: np.ndarray, mask: np.ndarray | None = None) -> MetricReport:
    """Per-task metric over the columns of ``preds``; degenerate or empty tasks are skipped."""
    fn = METRICS[name]
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.ndim == 1:
        preds, targets = preds[:, None], targets[:, None]
        mask = None if mask is None else np.asarray(mask)[:, None]
    if mask is None:
        mask = np.ones(preds.shape, dtype=bool)
    per_task, skipped = [], 0
    for t in range(preds.shape[1]):
        try:
            per_task.append(fn(preds[:, t], targets[:, t], mask[:, t]))
        except (DegenerateTask, EmptyMask):
            per_task.append(None)
            skipped += 1
    included = [v for v in per_task if v is not None]
    if not included:
        raise DegenerateTask(f"no evaluable task for {name}")
    return MetricReport(name, tuple(per_task), float(np.mean(included)), skipped)


def is_better(name: str, candidate: float, incumbent: float | None) -> bool:
    if incumbent is None:
        return True
    return candidate > incumbent if HIGHER_IS_BETTER[name] else candidate < incumbent
