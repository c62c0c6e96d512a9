"""Cutoff molecular graphs and order-{1,2} heterogeneous graphs.

A 2-body is an edge of the molecular graph, kept with canonical atom indices
a < b. The heterogeneous graph has three edge types, all materialized in both
directions so message aggregation is a plain segment sum:

    1-1  molecular-graph edges, attribute: distance
    1-2  atom-membership incidences (each 2-body has exactly two atoms)
    2-2  pairs of 2-bodies sharing exactly one atom, attribute: angle at the
         shared atom

All tables are built in a canonical sorted order so identical geometry yields
bit-identical graphs regardless of construction history.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .ingest import Molecule


def pairwise_distances(positions: np.ndarray) -> np.ndarray:
    """Full symmetric Euclidean distance matrix, zero diagonal."""
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    diff = pos[:, None, :] - pos[None, :, :]
    d = np.sqrt(np.sum(diff * diff, axis=-1))
    np.fill_diagonal(d, 0.0)
    return d


@dataclass
class MolecularGraph:
    """Distance graph: undirected edges (i < j) with d_ij < cutoff strictly."""

    n_atoms: int
    edges: np.ndarray      # (m, 2) int64, i < j
    distances: np.ndarray  # (m,) float64
    cutoff: float


def build_molecular_graph(mol: Molecule, cutoff: float) -> MolecularGraph:
    if cutoff <= 0:
        raise ValueError("cutoff must be positive")
    d = pairwise_distances(mol.positions)
    iu, ju = np.triu_indices(mol.n_atoms, k=1)
    mask = d[iu, ju] < cutoff
    edges = np.stack([iu[mask], ju[mask]], axis=1).astype(np.int64)
    return MolecularGraph(mol.n_atoms, edges, d[iu[mask], ju[mask]], float(cutoff))


@dataclass
class CompositionVocab:
    """Dense integer ids for atomic-number multisets of size 1 and 2.

    The same multiset always maps to the same id regardless of atom order;
    ids come from one counter so distinct multisets (including {z} vs {z,z})
    never collide. Unseen multisets allocate the next id unless the
    vocabulary is frozen.
    """

    ids: dict[tuple, int] = field(default_factory=dict)
    frozen: bool = False

    def id_for(self, atomic_numbers) -> int:
        key = tuple(sorted(int(z) for z in atomic_numbers))
        if not 1 <= len(key) <= 2:
            raise ValueError(f"composition multiset must have size 1 or 2, got {key}")
        if key not in self.ids:
            if self.frozen:
                raise KeyError(f"composition {key} not in frozen vocabulary")
            self.ids[key] = len(self.ids)
        return self.ids[key]

    @property
    def table_size(self) -> int:
        return len(self.ids)

    @property
    def sizes(self) -> tuple[int, int]:
        """(number of order-1 multisets, number of order-2 multisets)."""
        n1 = sum(1 for k in self.ids if len(k) == 1)
        return n1, len(self.ids) - n1

    def to_arrays(self) -> dict[str, np.ndarray]:
        # Row index = id; singletons padded with -1.
        keys = sorted(self.ids.items(), key=lambda kv: kv[1])
        padded = [list(k) + [-1] * (2 - len(k)) for k, _ in keys]
        return {"vocab_keys": np.array(padded, dtype=np.int64).reshape(-1, 2)}

    @classmethod
    def from_arrays(cls, arrays, frozen: bool = True) -> "CompositionVocab":
        ids = {}
        for i, (a, b) in enumerate(arrays["vocab_keys"]):
            key = (int(a),) if b < 0 else (int(a), int(b))
            ids[key] = i
        return cls(ids, frozen=frozen)


def hash_composition(vocab: CompositionVocab, atomic_numbers) -> int:
    """Stable dense id of an atomic-number multiset (size 1 or 2)."""
    return vocab.id_for(atomic_numbers)


def compute_angle(pair_a, pair_b, positions) -> float:
    """Angle in [0, pi] at the shared atom between two 2-bodies."""
    set_a, set_b = set(map(int, pair_a)), set(map(int, pair_b))
    shared = set_a & set_b
    if len(shared) != 1:
        raise ValueError(
            f"2-bodies must share exactly one atom, got {sorted(shared)} shared"
        )
    s = shared.pop()
    other_a = (set_a - {s}).pop()
    other_b = (set_b - {s}).pop()
    pos = np.asarray(positions, dtype=np.float64)
    u = pos[other_a] - pos[s]
    v = pos[other_b] - pos[s]
    cosang = float(np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v)))
    return math.acos(min(1.0, max(-1.0, cosang)))


@dataclass
class HeteroMolGraph:
    """Typed node/edge tables of an order-{1,2} heterogeneous graph.

    Edge index arrays address rows of the node tables. e11/e22 hold both
    directions of every undirected adjacency; e12 holds one row per
    (atom, 2-body) membership incidence and serves both directions.
    """

    n_mol: int
    # Order-1 nodes (atoms).
    z1: np.ndarray       # (n1,) atomic numbers
    comp1: np.ndarray    # (n1,) composition ids
    mol_id1: np.ndarray  # (n1,) molecule segment ids
    # Order-2 nodes (atom pairs, canonical a < b).
    pairs: np.ndarray    # (n2, 2) atom indices into the order-1 table
    comp2: np.ndarray    # (n2,)
    lengths: np.ndarray  # (n2,) pair distance
    mol_id2: np.ndarray  # (n2,)
    # Typed edges.
    e11_src: np.ndarray  # (m11,) directed
    e11_dst: np.ndarray
    e11_dist: np.ndarray
    e12_atom: np.ndarray  # (m12,) membership incidences
    e12_pair: np.ndarray
    e22_src: np.ndarray   # (m22,) directed
    e22_dst: np.ndarray
    e22_angle: np.ndarray

    @property
    def n_atoms(self) -> int:
        return int(self.z1.size)

    @property
    def n_pairs(self) -> int:
        return int(self.pairs.shape[0])


def build_hmg(g: MolecularGraph, mol: Molecule, vocab: CompositionVocab) -> HeteroMolGraph:
    """Assemble the heterogeneous graph of one molecule from its distance graph."""
    n1 = g.n_atoms
    z = mol.atomic_numbers
    comp1 = np.array([vocab.id_for([zi]) for zi in z], dtype=np.int64)

    # Order-2 nodes: exactly the molecular-graph edge set, sorted (a, b).
    order = np.lexsort((g.edges[:, 1], g.edges[:, 0])) if len(g.edges) else np.array([], dtype=np.int64)
    pairs = g.edges[order].reshape(-1, 2)
    lengths = g.distances[order]
    n2 = pairs.shape[0]
    comp2 = np.array(
        [vocab.id_for(z[p]) for p in pairs], dtype=np.int64
    ) if n2 else np.empty(0, dtype=np.int64)

    # 1-1 edges: both directions of every molecular-graph edge, sorted.
    if n2:
        src = np.concatenate([pairs[:, 0], pairs[:, 1]])
        dst = np.concatenate([pairs[:, 1], pairs[:, 0]])
        dist = np.concatenate([lengths, lengths])
        order11 = np.lexsort((dst, src))
        e11_src, e11_dst, e11_dist = src[order11], dst[order11], dist[order11]
    else:
        e11_src = e11_dst = np.empty(0, dtype=np.int64)
        e11_dist = np.empty(0, dtype=np.float64)

    # 1-2 incidences: each 2-body contains exactly its two end atoms.
    if n2:
        pair_idx = np.arange(n2, dtype=np.int64)
        e12_atom = np.concatenate([pairs[:, 0], pairs[:, 1]])
        e12_pair = np.concatenate([pair_idx, pair_idx])
        order12 = np.lexsort((e12_atom, e12_pair))
        e12_atom, e12_pair = e12_atom[order12], e12_pair[order12]
    else:
        e12_atom = e12_pair = np.empty(0, dtype=np.int64)

    # 2-2 edges: 2-bodies sharing exactly one atom. Distinct pairs can share
    # at most one atom, so grouping by member atom enumerates them all.
    by_atom: list[list[int]] = [[] for _ in range(n1)]
    for idx in range(n2):
        by_atom[int(pairs[idx, 0])].append(idx)
        by_atom[int(pairs[idx, 1])].append(idx)
    e22_i, e22_j, e22_theta = [], [], []
    for members in by_atom:
        for ia, ib in combinations(members, 2):
            theta = compute_angle(pairs[ia], pairs[ib], mol.positions)
            e22_i += [ia, ib]
            e22_j += [ib, ia]
            e22_theta += [theta, theta]
    if e22_i:
        e22_src = np.array(e22_i, dtype=np.int64)
        e22_dst = np.array(e22_j, dtype=np.int64)
        e22_angle = np.array(e22_theta, dtype=np.float64)
        order22 = np.lexsort((e22_dst, e22_src))
        e22_src, e22_dst, e22_angle = e22_src[order22], e22_dst[order22], e22_angle[order22]
    else:
        e22_src = e22_dst = np.empty(0, dtype=np.int64)
        e22_angle = np.empty(0, dtype=np.float64)

    return HeteroMolGraph(
        n_mol=1,
        z1=z.copy(), comp1=comp1, mol_id1=np.zeros(n1, dtype=np.int64),
        pairs=pairs.copy(), comp2=comp2, lengths=lengths.copy(),
        mol_id2=np.zeros(n2, dtype=np.int64),
        e11_src=e11_src, e11_dst=e11_dst, e11_dist=e11_dist,
        e12_atom=e12_atom, e12_pair=e12_pair,
        e22_src=e22_src, e22_dst=e22_dst, e22_angle=e22_angle,
    )


def batch_hmgs(graphs: list[HeteroMolGraph]) -> HeteroMolGraph:
    """Disjoint union with per-order index offsets; no cross-molecule edges."""
    if not graphs:
        raise ValueError("cannot batch zero graphs")
    parts: dict[str, list[np.ndarray]] = {name: [] for name in (
        "z1", "comp1", "mol_id1", "pairs", "comp2", "lengths", "mol_id2",
        "e11_src", "e11_dst", "e11_dist", "e12_atom", "e12_pair",
        "e22_src", "e22_dst", "e22_angle",
    )}
    off1 = off2 = off_mol = 0
    for g in graphs:
        parts["z1"].append(g.z1)
        parts["comp1"].append(g.comp1)
        parts["mol_id1"].append(g.mol_id1 + off_mol)
        parts["pairs"].append(g.pairs + off1)
        parts["comp2"].append(g.comp2)
        parts["lengths"].append(g.lengths)
        parts["mol_id2"].append(g.mol_id2 + off_mol)
        parts["e11_src"].append(g.e11_src + off1)
        parts["e11_dst"].append(g.e11_dst + off1)
        parts["e11_dist"].append(g.e11_dist)
        parts["e12_atom"].append(g.e12_atom + off1)
        parts["e12_pair"].append(g.e12_pair + off2)
        parts["e22_src"].append(g.e22_src + off2)
        parts["e22_dst"].append(g.e22_dst + off2)
        parts["e22_angle"].append(g.e22_angle)
        off1 += g.n_atoms
        off2 += g.n_pairs
        off_mol += g.n_mol
    cat = {name: np.concatenate(arrs) if arrs else np.empty(0) for name, arrs in parts.items()}
    cat["pairs"] = cat["pairs"].reshape(-1, 2)
    return HeteroMolGraph(n_mol=off_mol, **cat)


def count_message_edges(n_atoms: int, max_order: int) -> int:
    """Directed neighbor-slot count of a complete-graph heterogeneous graph.

    For each order p <= max_order there are C(n, p) nodes; a node of order p
    has C(p, q) neighbors of each lower order q, C(n-p, q-p) of each higher
    order q, and p(n-p) same-order neighbors.
    """
    if not 1 <= max_order <= n_atoms:
        raise ValueError(f"max_order must be in [1, {n_atoms}], got {max_order}")
    total = 0
    for p in range(1, max_order + 1):
        lower = sum(math.comb(p, q) for q in range(1, p))
        higher = sum(math.comb(n_atoms - p, q - p) for q in range(p + 1, max_order + 1))
        total += math.comb(n_atoms, p) * (lower + higher + p * (n_atoms - p))
    return total


def count_message_edges_brute_force(n_atoms: int, max_order: int) -> int:
    """Counting oracle: enumerate neighbor sets of every many-body of K_n.

    Same-order neighbors share exactly p-1 atoms (all other atoms for p = 1,
    matching complete-graph 1-1 edges); cross-order neighbors are bodies in
    a strict subset/superset relation.
    """
    if not 1 <= max_order <= n_atoms:
        raise ValueError(f"max_order must be in [1, {n_atoms}], got {max_order}")
    atoms = range(n_atoms)
    bodies = {p: [frozenset(c) for c in combinations(atoms, p)]
              for p in range(1, max_order + 1)}
    total = 0
    for p, nodes in bodies.items():
        for body in nodes:
            for q, others in bodies.items():
                if q == p:
                    total += sum(1 for o in others if len(body & o) == p - 1 and o != body)
                elif q < p:
                    total += sum(1 for o in others if o < body)
                else:
                    total += sum(1 for o in others if body < o)
    return total
