"""Geometry/target ingestion: XYZ parsing, unit and reference normalization,
and deterministic dataset splits.

Records follow the QM9 flavor of the XYZ format: a count line, a property
line, one ``symbol x y z [charge]`` line per atom, and optionally trailing
frequency/SMILES/InChI lines which are skipped. Property lines come in three
forms: the QM9 tagged form (``gdb <index> A B C <12 targets>``), a plain
positional list of target values, or ``name=value`` tokens.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass, field

import numpy as np

# Canonical target names, in QM9 property-line order.
PROPERTY_NAMES = (
    "mu", "alpha", "homo", "lumo", "gap", "r2",
    "zpve", "u0", "u", "h", "g", "cv",
)

# Targets stored in Hartree by QM9 and converted to eV for training.
ENERGY_PROPERTIES = frozenset({"homo", "lumo", "gap", "zpve", "u0", "u", "h", "g"})

# Targets with per-atom reference values to subtract.
REFERENCED_PROPERTIES = ("u0", "u", "h", "g", "cv")

# CODATA 2018 recommended value of the Hartree energy in eV.
HARTREE_TO_EV = 27.211386245988

ELEMENT_SYMBOLS = (
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne",
    "Na", "Mg", "Al", "Si", "P", "S", "Cl", "Ar", "K", "Ca",
    "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn",
    "Ga", "Ge", "As", "Se", "Br", "Kr", "Rb", "Sr", "Y", "Zr",
    "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In", "Sn",
    "Sb", "Te", "I", "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd",
    "Pm", "Sm", "Eu", "Gd", "Tb", "Dy", "Ho", "Er", "Tm", "Yb",
    "Lu", "Hf", "Ta", "W", "Re", "Os", "Ir", "Pt", "Au", "Hg",
    "Tl", "Pb", "Bi", "Po", "At", "Rn", "Fr", "Ra", "Ac", "Th",
    "Pa", "U", "Np", "Pu", "Am", "Cm", "Bk", "Cf", "Es", "Fm",
    "Md", "No", "Lr", "Rf", "Db", "Sg", "Bh", "Hs", "Mt", "Ds",
    "Rg", "Cn", "Nh", "Fl", "Mc", "Lv", "Ts", "Og",
)
SYMBOL_TO_Z = {s: z for z, s in enumerate(ELEMENT_SYMBOLS, start=1)}


class XyzParseError(ValueError):
    """Parse failure with the 1-based line number where it occurred."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class ReferenceLookupError(KeyError):
    """Missing (atomic number, property) entry in a reference table."""


@dataclass
class Molecule:
    """One structure: atomic numbers, Cartesian coordinates, named targets."""

    atomic_numbers: np.ndarray  # (n,) int64
    positions: np.ndarray       # (n, 3) float64, Angstrom
    targets: dict[str, float] = field(default_factory=dict)
    id: str = ""

    def __post_init__(self):
        self.atomic_numbers = np.asarray(self.atomic_numbers, dtype=np.int64)
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if self.atomic_numbers.size < 1:
            raise ValueError("molecule needs at least one atom")
        if self.atomic_numbers.min() < 1:
            raise ValueError("atomic numbers must be >= 1")
        if self.positions.shape[0] != self.atomic_numbers.size:
            raise ValueError("positions/atomic_numbers length mismatch")
        if not np.isfinite(self.positions).all():
            raise ValueError("positions must be finite")
        unknown = set(self.targets) - set(PROPERTY_NAMES)
        if unknown:
            raise ValueError(f"unknown target names: {sorted(unknown)}")

    @property
    def n_atoms(self) -> int:
        return int(self.atomic_numbers.size)


def _parse_float(token: str, line: int, what: str) -> float:
    # QM9 ships a handful of Mathematica-style exponents like 1.6991*^-9.
    try:
        return float(token.replace("*^", "e"))
    except ValueError:
        raise XyzParseError(f"non-numeric {what}: {token!r}", line) from None


def _is_float(token: str) -> bool:
    try:
        float(token.replace("*^", "e"))
        return True
    except ValueError:
        return False


def _parse_property_line(tokens: list[str], line: int) -> tuple[dict, str | None]:
    """Map a property line to target values; returns (targets, record id)."""
    if not tokens:
        return {}, None
    if all("=" in t for t in tokens):
        targets = {}
        for t in tokens:
            name, _, value = t.partition("=")
            if name not in PROPERTY_NAMES:
                raise XyzParseError(f"unknown property name: {name!r}", line)
            targets[name] = _parse_float(value, line, f"value for {name}")
        return targets, None
    if not _is_float(tokens[0]):
        # QM9 tagged form: tag, index, A, B, C, then the 12 targets.
        rec_id = tokens[0]
        values = tokens[1:]
        if values and values[0].isdigit():
            rec_id = f"{tokens[0]}_{values[0]}"
            values = values[1:]
        floats = [_parse_float(t, line, "property") for t in values]
        if len(floats) >= 15:
            floats = floats[3:15]
        targets = dict(zip(PROPERTY_NAMES, floats))
        return targets, rec_id
    floats = [_parse_float(t, line, "property") for t in tokens]
    return dict(zip(PROPERTY_NAMES, floats)), None


def parse_xyz(text: str, id: str = "", line_offset: int = 0) -> Molecule:
    """Parse one XYZ record into a Molecule (positions in Angstrom).

    ``line_offset`` shifts reported error line numbers when the record is a
    slice of a larger file.
    """
    lines = text.splitlines()

    def err(msg, i):
        raise XyzParseError(msg, line_offset + i)

    if not lines or not lines[0].strip():
        err("empty record", 1)
    count_token = lines[0].strip()
    if not count_token.isdigit() or int(count_token) < 1:
        err(f"malformed atom count line: {lines[0].strip()!r}", 1)
    n_atoms = int(count_token)
    if len(lines) < 2 + n_atoms:
        err(f"expected {n_atoms} atom lines, found {max(0, len(lines) - 2)}",
            len(lines) + 1)

    targets, rec_id = _parse_property_line(lines[1].split(), line_offset + 2)

    numbers = np.empty(n_atoms, dtype=np.int64)
    positions = np.empty((n_atoms, 3), dtype=np.float64)
    for i in range(n_atoms):
        lineno = line_offset + 3 + i
        fields = lines[2 + i].split()
        if len(fields) < 4:
            err(f"atom line needs 'symbol x y z': {lines[2 + i]!r}", 3 + i)
        symbol = fields[0]
        if symbol not in SYMBOL_TO_Z:
            raise XyzParseError(f"unknown element symbol: {symbol!r}", lineno)
        numbers[i] = SYMBOL_TO_Z[symbol]
        for k in range(3):
            positions[i, k] = _parse_float(fields[1 + k], lineno, "coordinate")
        # Any trailing columns (e.g. Mulliken charges) are ignored.

    return Molecule(numbers, positions, targets, id=rec_id or id)


def parse_xyz_text(text: str, source: str = "xyz") -> list[Molecule]:
    """Parse a concatenation of XYZ records (QM9 trailer lines are skipped)."""
    lines = text.splitlines()
    molecules = []
    i = 0
    k = 0
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        token = lines[i].strip()
        if not token.isdigit():
            raise XyzParseError(f"malformed atom count line: {token!r}", i + 1)
        n_atoms = int(token)
        end = i + 2 + n_atoms
        record = "\n".join(lines[i:end])
        molecules.append(parse_xyz(record, id=f"{source}:{k}", line_offset=i))
        k += 1
        i = end
        # Skip trailer lines (frequencies, SMILES, InChI) up to the next count line.
        while i < len(lines) and not lines[i].strip().isdigit():
            i += 1
    return molecules


def format_xyz(mol: Molecule) -> str:
    """Serialize a Molecule to an XYZ record that re-parses identically."""
    out = [str(mol.n_atoms)]
    out.append(" ".join(
        f"{name}={float(mol.targets[name])!r}"
        for name in PROPERTY_NAMES if name in mol.targets
    ))
    for z, pos in zip(mol.atomic_numbers, mol.positions):
        symbol = ELEMENT_SYMBOLS[int(z) - 1]
        out.append(f"{symbol} {float(pos[0])!r} {float(pos[1])!r} {float(pos[2])!r}")
    return "\n".join(out) + "\n"


def convert_units(targets: dict[str, float]) -> dict[str, float]:
    """Convert Hartree-valued energy targets to eV; all others pass through."""
    return {
        name: value * HARTREE_TO_EV if name in ENERGY_PROPERTIES else value
        for name, value in targets.items()
    }


@dataclass
class ReferenceTable:
    """Per-(atomic number, property) reference scalars."""

    values: dict[tuple[int, str], float]

    def lookup(self, z: int, prop: str) -> float:
        try:
            return self.values[(int(z), prop)]
        except KeyError:
            raise ReferenceLookupError(
                f"no reference value for atomic number {int(z)}, property {prop!r}"
            ) from None


def load_atomref(path=None) -> ReferenceTable:
    """Load a reference table; defaults to the packaged QM9 atomref file.

    Format: comment lines start with '#'; data rows are
    ``symbol`` followed by one value per REFERENCED_PROPERTIES column.
    """
    if path is None:
        text = (
            importlib.resources.files("hmgnet.data")
            .joinpath("atomref_qm9.txt")
            .read_text()
        )
    else:
        with open(path) as f:
            text = f.read()
    values = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if fields[0] not in SYMBOL_TO_Z:
            raise ValueError(f"atomref: unknown element symbol {fields[0]!r}")
        if len(fields) != 1 + len(REFERENCED_PROPERTIES):
            raise ValueError(f"atomref: expected {len(REFERENCED_PROPERTIES)} "
                             f"values in row {line!r}")
        z = SYMBOL_TO_Z[fields[0]]
        for prop, tok in zip(REFERENCED_PROPERTIES, fields[1:]):
            values[(z, prop)] = float(tok)
    return ReferenceTable(values)


def subtract_reference(mol: Molecule, prop: str, refs: ReferenceTable) -> float:
    """Target value minus the sum of per-atom reference values."""
    if prop not in REFERENCED_PROPERTIES:
        raise ValueError(f"property {prop!r} has no reference values "
                         f"(expected one of {REFERENCED_PROPERTIES})")
    total = sum(refs.lookup(z, prop) for z in mol.atomic_numbers)
    return mol.targets[prop] - total


def compose_gap(eps_homo: float, eps_lumo: float) -> float:
    """Orbital-energy gap: LUMO minus HOMO (both in eV)."""
    return eps_lumo - eps_homo


@dataclass(frozen=True)
class SplitSpec:
    n_train: int
    n_val: int
    n_test: int
    seed: int = 0

    def __post_init__(self):
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ValueError("split sizes must be non-negative")


def split_dataset(n_total: int, spec: SplitSpec):
    """Disjoint (train, val, test) index arrays from a seeded shuffle."""
    n_used = spec.n_train + spec.n_val + spec.n_test
    if n_used > n_total:
        raise ValueError(
            f"split sizes sum to {n_used} but dataset has {n_total} records"
        )
    perm = np.random.default_rng(spec.seed).permutation(n_total)
    train = perm[: spec.n_train]
    val = perm[spec.n_train : spec.n_train + spec.n_val]
    test = perm[spec.n_train + spec.n_val : n_used]
    return train, val, test
