"""Murcko-style scaffolds and permutation-invariant scaffold keys."""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .molgraph import MolGraph


def murcko_scaffold(graph: MolGraph) -> MolGraph:
    """Prune non-ring atoms of degree <= 1 until nothing changes.

    Ring atoms and linkers between ring systems survive; acyclic molecules
    reduce to the empty graph.
    """
    alive = [True] * graph.num_atoms
    adj = graph.neighbors()
    deg = [len(a) for a in adj]
    frontier = [i for i in range(graph.num_atoms) if deg[i] <= 1 and not graph.atoms[i].ring_member]
    while frontier:
        nxt = []
        for i in frontier:
            if not alive[i]:
                continue
            alive[i] = False
            for j in adj[i]:
                if alive[j]:
                    deg[j] -= 1
                    if deg[j] <= 1 and not graph.atoms[j].ring_member:
                        nxt.append(j)
        frontier = nxt
    return graph.subgraph([i for i in range(graph.num_atoms) if alive[i]])


def _atom_label(graph: MolGraph, adj_orders: list[list[str]], i: int) -> tuple:
    a = graph.atoms[i]
    return (a.element, a.aromatic, len(adj_orders[i]), tuple(sorted(adj_orders[i])))


def _rank(signatures: Sequence) -> list[int]:
    order = sorted(set(signatures))
    index = {s: k for k, s in enumerate(order)}
    return [index[s] for s in signatures]


def _refine(colors: list[int], nbrs: list[list[tuple[int, str]]]) -> list[int]:
    """Iterate neighborhood refinement to a stable partition."""
    n_classes = len(set(colors))
    while True:
        sigs = [
            (colors[i], tuple(sorted((colors[j], o) for j, o in nbrs[i])))
            for i in range(len(colors))
        ]
        new = _rank(sigs)
        n_new = len(set(new))
        if n_new == n_classes:
            return new
        colors, n_classes = new, n_new


def _certificate(labels: list[tuple], nbrs, colors: list[int]) -> tuple:
    # colors are discrete here, so they define the canonical atom order
    order = sorted(range(len(colors)), key=colors.__getitem__)
    pos = {atom: k for k, atom in enumerate(order)}
    edges = sorted(
        (min(pos[i], pos[j]), max(pos[i], pos[j]), o)
        for i in range(len(colors))
        for j, o in nbrs[i]
        if i < j
    )
    return (tuple(labels[i] for i in order), tuple(edges))


def canonical_certificate(graph: MolGraph) -> tuple:
    """Lexicographically least labeled adjacency over all refinement leaves."""
    n = graph.num_atoms
    if n == 0:
        return ((), ())
    nbrs: list[list[tuple[int, str]]] = [[] for _ in range(n)]
    for b in graph.bonds:
        i, j = b.endpoints
        nbrs[i].append((j, b.order))
        nbrs[j].append((i, b.order))
    adj_orders = [[o for _, o in nb] for nb in nbrs]
    labels = [_atom_label(graph, adj_orders, i) for i in range(n)]
    start = _refine(_rank(labels), nbrs)

    best = None

    def search(colors: list[int]) -> None:
        nonlocal best
        classes: dict[int, list[int]] = {}
        for i, c in enumerate(colors):
            classes.setdefault(c, []).append(i)
        ambiguous = [(len(members), c) for c, members in classes.items() if len(members) > 1]
        if not ambiguous:
            cert = _certificate(labels, nbrs, colors)
            if best is None or cert < best:
                best = cert
            return
        _, target = min(ambiguous)
        # branch on every member: picking one would depend on input order
        for atom in classes[target]:
            split = [2 * c for c in colors]
            split[atom] = 2 * target - 1
            search(_refine(_rank(split), nbrs))

    search(start)
    return best


@dataclass(frozen=True, order=True)
class ScaffoldKey:
    digest: bytes
    atom_count: int
    is_empty: bool = field(compare=False)

    @property
    def hex(self) -> str:
        return self.digest.hex()


def canonical_key(graph: MolGraph) -> ScaffoldKey:
    cert = canonical_certificate(graph)
    digest = hashlib.blake2b(repr(cert).encode("ascii"), digest_size=16).digest()
    return ScaffoldKey(digest, graph.num_atoms, graph.num_atoms == 0)


def scaffold_key(graph: MolGraph) -> ScaffoldKey:
    return canonical_key(murcko_scaffold(graph))


@dataclass(frozen=True)
class ScaffoldGroups:
    """Dataset indices grouped by scaffold; ``keys`` is the deterministic order."""

    keys: tuple[ScaffoldKey, ...]
    groups: dict[ScaffoldKey, tuple[int, ...]]

    def __iter__(self):
        return iter((k, self.groups[k]) for k in self.keys)

    def __len__(self) -> int:
        return len(self.keys)

    def group_of(self) -> dict[int, int]:
        """Map dataset index to position of its group in ``keys``."""
        return {idx: g for g, key in enumerate(self.keys) for idx in self.groups[key]}


def group_by_scaffold(indices: Iterable[int], graphs: Sequence[MolGraph] | None = None,
                      keys: Sequence[ScaffoldKey] | None = None) -> ScaffoldGroups:
    """Group ``indices`` by the scaffold key of ``graphs[index]`` (or precomputed ``keys[index]``)."""
    indices = list(indices)
    if keys is None:
        if graphs is None:
            raise ValueError("need graphs or precomputed keys")
        keys = [None] * len(graphs)
        for idx in indices:
            keys[idx] = scaffold_key(graphs[idx])
    buckets: dict[ScaffoldKey, list[int]] = {}
    for idx in indices:
        buckets.setdefault(keys[idx], []).append(idx)
    order = tuple(sorted(buckets, key=lambda k: (-len(buckets[k]), k.digest)))
    return ScaffoldGroups(order, {k: tuple(sorted(buckets[k])) for k in order})


def write_scaffold_manifest(path, indices: Sequence[int], keys: Sequence[ScaffoldKey]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["dataset_index", "scaffold_digest_hex", "scaffold_atom_count"])
        for idx, key in zip(indices, keys):
            w.writerow([idx, key.hex, key.atom_count])


def read_scaffold_manifest(path) -> list[tuple[int, str, int]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            (int(r["dataset_index"]), r["scaffold_digest_hex"], int(r["scaffold_atom_count"]))
            for r in csv.DictReader(fh)
        ]
