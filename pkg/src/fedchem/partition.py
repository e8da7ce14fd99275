"""FedChem benchmark construction: global split, Dirichlet allocation of scaffold
groups to clients, size balancing, and a heterogeneity measure."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from itertools import combinations
from typing import Sequence

import numpy as np

from .scaffold import ScaffoldGroups


class InvalidRatios(ValueError):
    pass


class PartitionError(ValueError):
    pass


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        if len(self.ratios) != 3 or any(not r > 0 for r in self.ratios):
            raise InvalidRatios(f"ratios must be three positive numbers, got {self.ratios}")
        if abs(sum(self.ratios) - 1.0) > 1e-12:
            raise InvalidRatios(f"ratios must sum to 1, got {sum(self.ratios)!r}")


def split_dataset(n: int, spec: SplitSpec = SplitSpec()) -> tuple[list[int], list[int], list[int]]:
    """Shuffle ``range(n)`` with the split seed and cut floor(r*n) train/valid, rest test."""
    if n < 10:
        raise ValueError(f"need at least 10 samples to split, got {n}")
    # small slack so e.g. 0.1*70 = 7.000000000000001 and 0.8*10 floor correctly
    n_train = math.floor(spec.ratios[0] * n + 1e-9)
    n_valid = math.floor(spec.ratios[1] * n + 1e-9)
    perm = np.random.default_rng(spec.seed).permutation(n).tolist()
    return perm[:n_train], perm[n_train:n_train + n_valid], perm[n_train + n_valid:]


def _rng(seed: int, stream: str) -> np.random.Generator:
    return np.random.default_rng([seed, *stream.encode()])


def dirichlet(rng: np.random.Generator, alpha: float, k: int) -> np.ndarray:
    g = rng.gamma(alpha, 1.0, size=k)
    total = g.sum()
    if total == 0.0:
        # every gamma draw underflowed; the limit of Dirichlet(alpha->0) is a vertex
        p = np.zeros(k)
        p[rng.integers(k)] = 1.0
        return p
    return g / total


def lda_partition(groups: ScaffoldGroups, num_clients: int, alpha: float, seed: int) -> list[list[int]]:
    if num_clients < 1:
        raise PartitionError("num_clients must be >= 1")
    if not alpha > 0:
        raise PartitionError("alpha must be > 0")
    rng = _rng(seed, "lda")
    clients: list[list[int]] = [[] for _ in range(num_clients)]
    for _, members in groups:
        p = dirichlet(rng, alpha, num_clients)
        owners = rng.choice(num_clients, size=len(members), p=p)
        for idx, owner in zip(members, owners):
            clients[owner].append(idx)
    return clients


@dataclass
class ClientPartition:
    alpha: float
    num_clients: int
    assignments: list[list[int]]
    seed: int
    heterogeneity: float | None = None

    def __post_init__(self):
        if len(self.assignments) != self.num_clients:
            raise PartitionError("assignment count differs from num_clients")
        seen: set[int] = set()
        for a in self.assignments:
            for idx in a:
                if idx in seen:
                    raise PartitionError(f"index {idx} assigned to two clients")
                seen.add(idx)

    @property
    def sizes(self) -> list[int]:
        return [len(a) for a in self.assignments]

    def covers(self, indices: Sequence[int]) -> bool:
        return sorted(i for a in self.assignments for i in a) == sorted(indices)

    def to_json(self) -> dict:
        return {
            "alpha": self.alpha,
            "num_clients": self.num_clients,
            "seed": self.seed,
            "assignments": [list(map(int, a)) for a in self.assignments],
            "heterogeneity_index": self.heterogeneity,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "ClientPartition":
        return cls(
            alpha=payload["alpha"],
            num_clients=payload["num_clients"],
            assignments=[list(a) for a in payload["assignments"]],
            seed=payload["seed"],
            heterogeneity=payload.get("heterogeneity_index"),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, sort_keys=True, indent=1)

    @classmethod
    def load(cls, path) -> "ClientPartition":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def balance_clients(raw: Sequence[Sequence[int]], seed: int = 0, alpha: float = float("nan")) -> ClientPartition:
    """Move random indices from the largest to the smallest client until sizes differ by <= 1.

    Ties pick the lowest client id. Each client's list is sorted afterwards.
    """
    rng = _rng(seed, "balance")
    clients = [list(c) for c in raw]
    sizes = [len(c) for c in clients]
    while len(clients) > 1:
        big = int(np.argmax(sizes))
        small = int(np.argmin(sizes))
        if sizes[big] - sizes[small] <= 1:
            break
        k = int(rng.integers(sizes[big]))
        clients[big][k], clients[big][-1] = clients[big][-1], clients[big][k]
        clients[small].append(clients[big].pop())
        sizes[big] -= 1
        sizes[small] += 1
    return ClientPartition(alpha, len(clients), [sorted(c) for c in clients], seed)


def heterogeneity_index(partition: ClientPartition, groups: ScaffoldGroups) -> float:
    """Mean pairwise total-variation distance between client scaffold distributions."""
    group_of = groups.group_of()
    dists = []
    for a in partition.assignments:
        counts = np.bincount([group_of[i] for i in a], minlength=len(groups)).astype(float)
        dists.append(counts / counts.sum() if counts.sum() else counts)
    pairs = list(combinations(range(len(dists)), 2))
    if not pairs:
        return 0.0
    return float(np.mean([0.5 * np.abs(dists[i] - dists[j]).sum() for i, j in pairs]))


def build_partition(groups: ScaffoldGroups, num_clients: int, alpha: float, seed: int) -> ClientPartition:
    raw = lda_partition(groups, num_clients, alpha, seed)
    part = balance_clients(raw, seed=seed, alpha=alpha)
    part.heterogeneity = heterogeneity_index(part, groups)
    return part
