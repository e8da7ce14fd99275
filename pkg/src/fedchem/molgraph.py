"""SMILES parsing into heavy-atom molecular graphs and fixed-width featurization.

Only a practical subset of SMILES is supported: organic-subset and bracket
atoms, bonds ``- = # $ :``, branches, ring closures (``1``..``9`` and ``%nn``)
and dot-disconnected fragments. Stereo markers and isotopes are parsed and
dropped. Aromaticity is taken verbatim from the notation; no perception.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

BOND_ORDERS = ("single", "double", "triple", "aromatic")

ORGANIC_SUBSET = ("Cl", "Br", "B", "C", "N", "O", "P", "S", "F", "I")
AROMATIC_ORGANIC = ("b", "c", "n", "o", "p", "s")
# lowercase symbols accepted inside brackets
AROMATIC_BRACKET = ("se", "as", "te", "b", "c", "n", "o", "p", "s")

# a tolerant superset of the periodic table for bracket atoms
_ELEMENTS = frozenset(
    """H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co Ni
    Cu Zn Ga Ge As Se Br Kr Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te I Xe
    Cs Ba La Ce Pr Nd Pm Sm Eu Gd Tb Dy Ho Er Tm Yb Lu Hf Ta W Re Os Ir Pt Au Hg
    Tl Pb Bi Po At Rn Fr Ra Ac Th Pa U Np Pu Am Cm Bk Cf Es Fm Md No Lr""".split()
)

_BOND_SYMBOLS = {"-": "single", "=": "double", "#": "triple", "$": "triple", ":": "aromatic"}


class SmilesError(ValueError):
    """Base class for SMILES parse failures."""


class EmptyInput(SmilesError):
    pass


class UnknownToken(SmilesError):
    pass


class UnbalancedParenthesis(SmilesError):
    pass


class UnmatchedRingClosure(SmilesError):
    pass


class InvalidBond(SmilesError):
    """Self-loop or duplicate bond implied by ring closures."""


@dataclass(frozen=True)
class AtomRecord:
    element: str
    aromatic: bool = False
    formal_charge: int = 0
    explicit_h: int = 0
    ring_member: bool = False


@dataclass(frozen=True)
class BondRecord:
    endpoints: tuple[int, int]
    order: str = "single"

    def __post_init__(self):
        i, j = self.endpoints
        if i == j:
            raise InvalidBond(f"self-loop bond on atom {i}")
        if self.order not in BOND_ORDERS:
            raise ValueError(f"unknown bond order {self.order!r}")


@dataclass(frozen=True)
class MolGraph:
    atoms: tuple[AtomRecord, ...]
    bonds: tuple[BondRecord, ...]
    source_text: str = ""

    @property
    def num_atoms(self) -> int:
        return len(self.atoms)

    def neighbors(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in self.atoms]
        for b in self.bonds:
            i, j = b.endpoints
            adj[i].append(j)
            adj[j].append(i)
        return adj

    def degrees(self) -> list[int]:
        deg = [0] * len(self.atoms)
        for b in self.bonds:
            i, j = b.endpoints
            deg[i] += 1
            deg[j] += 1
        return deg

    def permute(self, perm: Sequence[int]) -> "MolGraph":
        """Relabel atoms so that old atom ``perm[k]`` becomes new atom ``k``."""
        inverse = [0] * len(perm)
        for new, old in enumerate(perm):
            inverse[old] = new
        atoms = tuple(self.atoms[old] for old in perm)
        bonds = tuple(
            BondRecord((inverse[b.endpoints[0]], inverse[b.endpoints[1]]), b.order)
            for b in self.bonds
        )
        return MolGraph(atoms, bonds, self.source_text)

    def subgraph(self, keep: Sequence[int]) -> "MolGraph":
        """Induced subgraph on ``keep`` (sorted); indices compacted, order preserved."""
        keep = sorted(keep)
        remap = {old: new for new, old in enumerate(keep)}
        atoms = tuple(self.atoms[i] for i in keep)
        bonds = tuple(
            BondRecord((remap[b.endpoints[0]], remap[b.endpoints[1]]), b.order)
            for b in self.bonds
            if b.endpoints[0] in remap and b.endpoints[1] in remap
        )
        return MolGraph(atoms, bonds, self.source_text)


def ring_membership(num_atoms: int, bonds: Sequence[BondRecord]) -> list[bool]:
    """Flag atoms lying on at least one cycle (endpoints of non-bridge bonds)."""
    adj: list[list[tuple[int, int]]] = [[] for _ in range(num_atoms)]
    for k, b in enumerate(bonds):
        i, j = b.endpoints
        adj[i].append((j, k))
        adj[j].append((i, k))

    disc = [-1] * num_atoms
    low = [0] * num_atoms
    is_bridge = [False] * len(bonds)
    timer = 0
    for root in range(num_atoms):
        if disc[root] != -1:
            continue
        disc[root] = low[root] = timer
        timer += 1
        # iterative DFS: (node, incoming bond id, neighbor iterator position)
        stack = [(root, -1, 0)]
        while stack:
            node, via, pos = stack[-1]
            if pos < len(adj[node]):
                stack[-1] = (node, via, pos + 1)
                nxt, bond_id = adj[node][pos]
                if bond_id == via:
                    continue
                if disc[nxt] == -1:
                    disc[nxt] = low[nxt] = timer
                    timer += 1
                    stack.append((nxt, bond_id, 0))
                else:
                    low[node] = min(low[node], disc[nxt])
            else:
                stack.pop()
                if stack:
                    parent = stack[-1][0]
                    low[parent] = min(low[parent], low[node])
                    if low[node] > disc[parent]:
                        is_bridge[via] = True

    ring = [False] * num_atoms
    for k, b in enumerate(bonds):
        if not is_bridge[k]:
            ring[b.endpoints[0]] = True
            ring[b.endpoints[1]] = True
    return ring


@dataclass
class _PendingAtom:
    element: str
    aromatic: bool
    charge: int = 0
    hcount: int = 0


def _parse_bracket(text: str, start: int) -> tuple[_PendingAtom, int]:
    end = text.find("]", start)
    if end == -1:
        raise UnknownToken(f"unterminated bracket atom at position {start}")
    body = text[start + 1:end]
    pos = 0
    while pos < len(body) and body[pos].isdigit():  # isotope, discarded
        pos += 1
    rest = body[pos:]
    element = None
    aromatic = False
    for sym in AROMATIC_BRACKET:
        if rest.startswith(sym):
            element, aromatic = sym.capitalize(), True
            break
    if element is None:
        if len(rest) >= 2 and rest[:2] in _ELEMENTS:
            element = rest[:2]
        elif rest[:1] in _ELEMENTS or rest[:1] == "*":
            element = rest[:1]
        else:
            raise UnknownToken(f"unknown bracket atom [{body}] at position {start}")
    pos += len(element)
    while pos < len(body) and body[pos] == "@":  # chirality, discarded
        pos += 1
    if body[pos:pos + 2] in ("TH", "AL", "SP", "TB", "OH"):
        pos += 2
        while pos < len(body) and body[pos].isdigit():
            pos += 1
    hcount = 0
    if pos < len(body) and body[pos] == "H":
        pos += 1
        hcount = 1
        if pos < len(body) and body[pos].isdigit():
            hcount = int(body[pos])
            pos += 1
    charge = 0
    if pos < len(body) and body[pos] in "+-":
        sign = 1 if body[pos] == "+" else -1
        pos += 1
        if pos < len(body) and body[pos].isdigit():
            num = ""
            while pos < len(body) and body[pos].isdigit():
                num += body[pos]
                pos += 1
            charge = sign * int(num)
        else:
            charge = sign
            while pos < len(body) and body[pos] == ("+" if sign > 0 else "-"):
                charge += sign
                pos += 1
    if pos < len(body) and body[pos] == ":":  # atom class, discarded
        pos += 1
        while pos < len(body) and body[pos].isdigit():
            pos += 1
    if pos != len(body):
        raise UnknownToken(f"unparseable bracket atom [{body}] at position {start}")
    return _PendingAtom(element, aromatic, charge, hcount), end + 1


def _fold_hydrogens(atoms, bonds):
    """Drop neutral [H] atoms, crediting them to their heavy neighbor's H count."""
    drop = set()
    for i, a in enumerate(atoms):
        if a.element != "H" or a.charge != 0:
            continue
        nbrs = [j for (p, q) in bonds for j in (p, q) if i in (p, q) and j != i]
        if len(nbrs) <= 1 and all(atoms[j].element != "H" for j in nbrs):
            drop.add(i)
            for j in nbrs:
                atoms[j].hcount += 1
    if not drop:
        return atoms, bonds
    remap = {}
    kept = []
    for i, a in enumerate(atoms):
        if i not in drop:
            remap[i] = len(kept)
            kept.append(a)
    new_bonds = {
        (remap[p], remap[q]): o for (p, q), o in bonds.items() if p in remap and q in remap
    }
    return kept, new_bonds


def parse_smiles(text: str) -> MolGraph:
    """Parse a SMILES string into a heavy-atom :class:`MolGraph`."""
    if not text or not text.strip():
        raise EmptyInput("empty SMILES")
    if not text.isascii():
        raise UnknownToken("non-ASCII SMILES")
    text = text.strip()

    atoms: list[_PendingAtom] = []
    bonds: dict[tuple[int, int], str] = {}
    branch_stack: list[int] = []
    open_rings: dict[int, tuple[int, str | None]] = {}
    prev: int | None = None
    pending_bond: str | None = None

    def add_bond(i: int, j: int, order: str | None) -> None:
        if i == j:
            raise InvalidBond(f"self-loop on atom {i} in {text!r}")
        key = (min(i, j), max(i, j))
        if key in bonds:
            raise InvalidBond(f"duplicate bond {key} in {text!r}")
        if order is None:
            order = "aromatic" if atoms[i].aromatic and atoms[j].aromatic else "single"
        bonds[key] = order

    pos = 0
    n = len(text)
    while pos < n:
        ch = text[pos]
        new_atom: _PendingAtom | None = None
        if ch == "[":
            new_atom, pos = _parse_bracket(text, pos)
        elif text.startswith(("Cl", "Br"), pos):
            new_atom = _PendingAtom(text[pos:pos + 2], False)
            pos += 2
        elif ch in "BCNOPSFI":
            new_atom = _PendingAtom(ch, False)
            pos += 1
        elif ch in "bcnops":
            new_atom = _PendingAtom(ch.upper(), True)
            pos += 1
        elif ch == "*":
            new_atom = _PendingAtom("*", False)
            pos += 1
        elif ch in _BOND_SYMBOLS:
            pending_bond = _BOND_SYMBOLS[ch]
            pos += 1
            continue
        elif ch in "/\\":  # directional single bonds, stereo dropped
            pending_bond = "single"
            pos += 1
            continue
        elif ch == "(":
            if prev is None:
                raise UnbalancedParenthesis(f"branch opened before any atom in {text!r}")
            branch_stack.append(prev)
            pos += 1
            continue
        elif ch == ")":
            if not branch_stack:
                raise UnbalancedParenthesis(f"unmatched ')' at position {pos} in {text!r}")
            prev = branch_stack.pop()
            pending_bond = None
            pos += 1
            continue
        elif ch == ".":
            prev = None
            pending_bond = None
            pos += 1
            continue
        elif ch.isdigit() or ch == "%":
            if ch == "%":
                digits = text[pos + 1:pos + 3]
                if len(digits) != 2 or not digits.isdigit():
                    raise UnknownToken(f"bad %nn ring label at position {pos}")
                label = int(digits)
                pos += 3
            else:
                label = int(ch)
                pos += 1
            if prev is None:
                raise UnknownToken(f"ring label {label} without atom in {text!r}")
            if label in open_rings:
                other, order = open_rings.pop(label)
                if order is not None and pending_bond is not None and order != pending_bond:
                    raise InvalidBond(f"conflicting ring bond orders for label {label}")
                add_bond(other, prev, pending_bond or order)
            else:
                open_rings[label] = (prev, pending_bond)
            pending_bond = None
            continue
        else:
            raise UnknownToken(f"unknown token {ch!r} at position {pos} in {text!r}")

        atoms.append(new_atom)
        idx = len(atoms) - 1
        if prev is not None:
            add_bond(prev, idx, pending_bond)
        pending_bond = None
        prev = idx

    if branch_stack:
        raise UnbalancedParenthesis(f"{len(branch_stack)} unclosed '(' in {text!r}")
    if open_rings:
        raise UnmatchedRingClosure(f"ring labels {sorted(open_rings)} never closed in {text!r}")
    if pending_bond is not None:
        raise UnknownToken(f"dangling bond symbol at end of {text!r}")
    if not atoms:
        raise EmptyInput(f"no atoms in {text!r}")

    atoms, bonds = _fold_hydrogens(atoms, bonds)
    if not atoms:
        raise EmptyInput(f"no heavy atoms in {text!r}")
    bond_records = tuple(BondRecord(k, o) for k, o in bonds.items())
    ring = ring_membership(len(atoms), bond_records)
    atom_records = tuple(
        AtomRecord(a.element, a.aromatic, a.charge, a.hcount, ring[i])
        for i, a in enumerate(atoms)
    )
    return MolGraph(atom_records, bond_records, text)


DEFAULT_VOCAB = ("C", "N", "O", "F", "P", "S", "Cl", "Br", "I", "B", "Si", "Se", "other")
MAX_DEGREE = 5


@dataclass(frozen=True)
class FeatureSpec:
    element_vocab: tuple[str, ...] = DEFAULT_VOCAB

    def __post_init__(self):
        if self.element_vocab[-1] != "other":
            raise ValueError("element vocabulary must end with the 'other' bucket")

    @property
    def node_width(self) -> int:
        # element one-hot, degree 0..5 one-hot, aromatic, charge, H count
        return len(self.element_vocab) + (MAX_DEGREE + 1) + 3

    @property
    def edge_width(self) -> int:
        return len(BOND_ORDERS)


@dataclass(frozen=True)
class FeaturizedGraph:
    """Numeric view of one molecule; edges are directed (message from src into dst)."""

    nodes: np.ndarray
    edges: np.ndarray
    src: np.ndarray
    dst: np.ndarray

    @property
    def num_nodes(self) -> int:
        return self.nodes.shape[0]


def featurize(graph: MolGraph, spec: FeatureSpec = FeatureSpec()) -> FeaturizedGraph:
    vocab = {sym: k for k, sym in enumerate(spec.element_vocab)}
    other = vocab["other"]
    n_el = len(spec.element_vocab)
    deg = graph.degrees()
    x = np.zeros((graph.num_atoms, spec.node_width))
    for i, atom in enumerate(graph.atoms):
        x[i, vocab.get(atom.element, other)] = 1.0
        x[i, n_el + min(deg[i], MAX_DEGREE)] = 1.0
        x[i, n_el + MAX_DEGREE + 1] = float(atom.aromatic)
        x[i, n_el + MAX_DEGREE + 2] = float(atom.formal_charge)
        x[i, n_el + MAX_DEGREE + 3] = float(atom.explicit_h)

    m = len(graph.bonds)
    e = np.zeros((2 * m, spec.edge_width))
    src = np.empty(2 * m, dtype=np.int64)
    dst = np.empty(2 * m, dtype=np.int64)
    for k, b in enumerate(graph.bonds):
        i, j = b.endpoints
        slot = BOND_ORDERS.index(b.order)
        e[2 * k, slot] = e[2 * k + 1, slot] = 1.0
        src[2 * k], dst[2 * k] = i, j
        src[2 * k + 1], dst[2 * k + 1] = j, i
    return FeaturizedGraph(x, e, src, dst)
