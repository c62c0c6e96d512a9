"""Dataset cache: molecules, composition vocabulary, heterogeneous graphs,
and feature tables serialized as one named-array container so training never
re-parses text.

Variable-length per-molecule tables are stored flattened with offset arrays;
edge indices are kept molecule-local and re-offset at batch time.
"""

from __future__ import annotations

import gzip
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import container
from .featurize import FeatureBanks, HmgFeatures, featurize_hmg
from .graph import (CompositionVocab, HeteroMolGraph, batch_hmgs,
                    build_hmg, build_molecular_graph)
from .ingest import (PROPERTY_NAMES, REFERENCED_PROPERTIES, Molecule,
                     ReferenceTable, convert_units, parse_xyz_text,
                     subtract_reference)

CACHE_KIND = "hmgnet-dataset"

# Offset-indexed flat tables: name -> (per-molecule row-count source)
_FLAT_FIELDS = (
    "comp1", "z1", "pairs", "comp2", "lengths",
    "e11_src", "e11_dst", "e11_dist", "e12_atom", "e12_pair",
    "e22_src", "e22_dst", "e22_angle",
)


def read_xyz_path(path) -> list[Molecule]:
    """Parse one file or every *.xyz/*.xyz.gz under a directory."""
    path = Path(path)
    if path.is_dir():
        files = sorted(p for p in path.iterdir()
                       if p.name.endswith((".xyz", ".xyz.gz")))
        if not files:
            raise FileNotFoundError(f"no .xyz files under {path}")
        mols = []
        for f in files:
            mols.extend(read_xyz_path(f))
        return mols
    opener = gzip.open if path.name.endswith(".gz") else open
    with opener(path, "rt") as f:
        text = f.read()
    return parse_xyz_text(text, source=path.stem.removesuffix(".xyz"))


def normalize_targets(mol: Molecule, refs: ReferenceTable | None) -> dict[str, float]:
    """Reference-subtract the thermochemical targets, then convert units."""
    targets = dict(mol.targets)
    if refs is not None:
        for prop in REFERENCED_PROPERTIES:
            if prop in targets:
                targets[prop] = subtract_reference(
                    Molecule(mol.atomic_numbers, mol.positions,
                             {prop: targets[prop]}, mol.id),
                    prop, refs)
    return convert_units(targets)


@dataclass
class DatasetCache:
    """In-memory view of a prepared dataset."""

    ids: list[str]
    targets: np.ndarray      # (n_mol, 12), NaN where absent
    vocab: CompositionVocab
    banks: FeatureBanks
    cutoff: float
    graphs: list[HeteroMolGraph]
    features: list[HmgFeatures]

    @property
    def n_molecules(self) -> int:
        return len(self.ids)

    def target_column(self, name: str) -> np.ndarray:
        if name not in PROPERTY_NAMES:
            raise KeyError(f"unknown target {name!r}; valid: {PROPERTY_NAMES}")
        return self.targets[:, PROPERTY_NAMES.index(name)]

    def make_batch(self, indices, target: str | None = None):
        """(batched graph, batched features, target vector) for the indices."""
        indices = [int(i) for i in indices]
        hmg = batch_hmgs([self.graphs[i] for i in indices])
        feats = HmgFeatures(
            e11=np.concatenate([self.features[i].e11 for i in indices]),
            x2=np.concatenate([self.features[i].x2 for i in indices]),
            e22=np.concatenate([self.features[i].e22 for i in indices]),
        )
        y = None
        if target is not None:
            y = self.target_column(target)[indices]
            if not np.isfinite(y).all():
                bad = [self.ids[i] for i, v in zip(indices, y) if not np.isfinite(v)]
                raise ValueError(f"molecules missing target {target!r}: {bad[:5]}")
        return hmg, feats, y


def prepare_dataset(molecules: list[Molecule], cutoff: float, k_rbf: int = 64,
                    refs: ReferenceTable | None = None,
                    exclude_ids: set[str] | None = None) -> DatasetCache:
    """Build vocabulary, graphs, and features for a molecule list."""
    if exclude_ids:
        molecules = [m for m in molecules if m.id not in exclude_ids]
    if not molecules:
        raise ValueError("no molecules to prepare")
    banks = FeatureBanks.for_cutoff(cutoff, k_rbf)
    vocab = CompositionVocab()
    ids, rows, graphs, features = [], [], [], []
    for mol in molecules:
        hmg = build_hmg(build_molecular_graph(mol, cutoff), mol, vocab)
        graphs.append(hmg)
        features.append(featurize_hmg(hmg, banks))
        ids.append(mol.id)
        targets = normalize_targets(mol, refs)
        rows.append([targets.get(name, np.nan) for name in PROPERTY_NAMES])
    return DatasetCache(
        ids=ids, targets=np.array(rows, dtype=np.float64).reshape(-1, 12),
        vocab=vocab, banks=banks, cutoff=float(cutoff),
        graphs=graphs, features=features,
    )


def save_cache(cache: DatasetCache, path) -> None:
    n = cache.n_molecules
    arrays: dict[str, np.ndarray] = {}
    offsets = {name: np.zeros(n + 1, dtype=np.int64) for name in
               ("atoms", "pairs", "e11", "e12", "e22")}
    for i, g in enumerate(cache.graphs):
        offsets["atoms"][i + 1] = offsets["atoms"][i] + g.n_atoms
        offsets["pairs"][i + 1] = offsets["pairs"][i] + g.n_pairs
        offsets["e11"][i + 1] = offsets["e11"][i] + g.e11_src.size
        offsets["e12"][i + 1] = offsets["e12"][i] + g.e12_atom.size
        offsets["e22"][i + 1] = offsets["e22"][i] + g.e22_src.size
    for name, arr in offsets.items():
        arrays[f"offsets/{name}"] = arr

    def cat(field, empty_dtype=np.int64):
        parts = [getattr(g, field) for g in cache.graphs]
        return (np.concatenate(parts) if parts else np.empty(0, dtype=empty_dtype))

    for field in _FLAT_FIELDS:
        arrays[f"graph/{field}"] = cat(field)
    arrays["graph/pairs"] = arrays["graph/pairs"].reshape(-1, 2)
    arrays["feat/e11"] = np.concatenate([f.e11 for f in cache.features])
    arrays["feat/x2"] = np.concatenate([f.x2 for f in cache.features])
    arrays["feat/e22"] = np.concatenate([f.e22 for f in cache.features])
    arrays["targets"] = cache.targets
    ids_blob = "\n".join(cache.ids).encode("utf-8")
    arrays["ids"] = np.frombuffer(ids_blob, dtype=np.uint8).copy()
    arrays.update(cache.vocab.to_arrays())
    container.save_arrays(path, arrays, meta={
        "kind": CACHE_KIND, "n_molecules": n,
        "banks": cache.banks.to_meta(), "cutoff": cache.cutoff,
        "properties": list(PROPERTY_NAMES),
    })


def load_cache(path) -> DatasetCache:
    arrays, meta = container.load_arrays(path)
    if meta.get("kind") != CACHE_KIND:
        raise ValueError(f"{path}: not a dataset cache")
    n = meta["n_molecules"]
    banks = FeatureBanks.from_meta(meta["banks"])
    vocab = CompositionVocab.from_arrays(arrays, frozen=True)
    ids = arrays["ids"].tobytes().decode("utf-8").split("\n") if n else []
    off = {name: arrays[f"offsets/{name}"] for name in
           ("atoms", "pairs", "e11", "e12", "e22")}
    graphs, features = [], []
    for i in range(n):
        a0, a1 = off["atoms"][i], off["atoms"][i + 1]
        p0, p1 = off["pairs"][i], off["pairs"][i + 1]
        s = {"e11": slice(off["e11"][i], off["e11"][i + 1]),
             "e12": slice(off["e12"][i], off["e12"][i + 1]),
             "e22": slice(off["e22"][i], off["e22"][i + 1])}
        graphs.append(HeteroMolGraph(
            n_mol=1,
            z1=arrays["graph/z1"][a0:a1],
            comp1=arrays["graph/comp1"][a0:a1],
            mol_id1=np.zeros(a1 - a0, dtype=np.int64),
            pairs=arrays["graph/pairs"][p0:p1],
            comp2=arrays["graph/comp2"][p0:p1],
            lengths=arrays["graph/lengths"][p0:p1],
            mol_id2=np.zeros(p1 - p0, dtype=np.int64),
            e11_src=arrays["graph/e11_src"][s["e11"]],
            e11_dst=arrays["graph/e11_dst"][s["e11"]],
            e11_dist=arrays["graph/e11_dist"][s["e11"]],
            e12_atom=arrays["graph/e12_atom"][s["e12"]],
            e12_pair=arrays["graph/e12_pair"][s["e12"]],
            e22_src=arrays["graph/e22_src"][s["e22"]],
            e22_dst=arrays["graph/e22_dst"][s["e22"]],
            e22_angle=arrays["graph/e22_angle"][s["e22"]],
        ))
        features.append(HmgFeatures(
            e11=arrays["feat/e11"][s["e11"]],
            x2=arrays["feat/x2"][p0:p1],
            e22=arrays["feat/e22"][s["e22"]],
        ))
    return DatasetCache(
        ids=ids, targets=arrays["targets"], vocab=vocab, banks=banks,
        cutoff=float(meta["cutoff"]), graphs=graphs, features=features,
    )
