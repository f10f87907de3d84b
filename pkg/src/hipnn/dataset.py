"""Molecular dataset ingestion: extended-XYZ and QM9 parsing, pruning, splits.

All coordinates are converted to Bohr and all energies to kcal/mol at parse
time, so nothing downstream deals with units.
"""
from __future__ import annotations

import logging
import os
import shlex
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

ANGSTROM_TO_BOHR = 1.8897259886
HARTREE_TO_KCAL = 627.509474
EV_TO_KCAL = 23.060547830619

ELEMENTS = (
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne",
    "Na", "Mg", "Al", "Si", "P", "S", "Cl", "Ar", "K", "Ca",
    "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn",
    "Ga", "Ge", "As", "Se", "Br", "Kr", "Rb", "Sr", "Y", "Zr",
    "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In", "Sn",
    "Sb", "Te", "I", "Xe",
)
ATOMIC_NUMBERS = {sym: z for z, sym in enumerate(ELEMENTS, start=1)}

_LENGTH_UNITS = {"angstrom": ANGSTROM_TO_BOHR, "bohr": 1.0}
_ENERGY_UNITS = {"hartree": HARTREE_TO_KCAL, "kcal/mol": 1.0, "ev": EV_TO_KCAL}

# Column of U_0 (Hartree) in the whitespace-split QM9 property line.
QM9_U0_COLUMN = 12
# Free-atom U_0 (Hartree) at the QM9 level of theory, from the dataset's atomref table.
QM9_ATOM_U0 = {1: -0.500273, 6: -37.846772, 7: -54.583861, 8: -75.064579, 9: -99.718730}


class DatasetError(ValueError):
    """Raised for malformed or inconsistent molecular data."""


class XYZParseError(DatasetError):
    def __init__(self, message: str, frame: int, line: int):
        super().__init__(f"frame {frame}, line {line}: {message}")
        self.frame = frame
        self.line = line


class UnknownElementError(XYZParseError):
    def __init__(self, symbol: str, frame: int, line: int):
        super().__init__(f"unknown element {symbol!r}", frame, line)
        self.symbol = symbol


class SpeciesError(DatasetError):
    """An atomic number is not part of the configured species table."""

    def __init__(self, atomic_number: int, species: "SpeciesTable"):
        sym = ELEMENTS[atomic_number - 1] if 0 < atomic_number <= len(ELEMENTS) else "?"
        super().__init__(
            f"species Z={atomic_number} ({sym}) not in species table {list(species.entries)}"
        )
        self.atomic_number = atomic_number


@dataclass(frozen=True)
class SpeciesTable:
    """Ordered atomic numbers handled by a model; position = one-hot index."""

    entries: tuple[int, ...] = (1, 6, 7, 8, 9)

    def __post_init__(self):
        entries = tuple(int(z) for z in self.entries)
        if len(set(entries)) != len(entries):
            raise ValueError(f"species entries must be distinct, got {entries}")
        if not entries or min(entries) < 1:
            raise ValueError("species entries must be positive atomic numbers")
        object.__setattr__(self, "entries", entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, z) -> bool:
        return int(z) in self.entries

    def index(self, z: int) -> int:
        try:
            return self.entries.index(int(z))
        except ValueError:
            raise SpeciesError(int(z), self) from None

    def indices(self, atomic_numbers: Iterable[int]) -> np.ndarray:
        return np.array([self.index(z) for z in atomic_numbers], dtype=np.intp)


@dataclass
class MolecularConfiguration:
    """Atoms of one molecule. Coordinates in Bohr, energy in kcal/mol."""

    atomic_numbers: np.ndarray
    coordinates: np.ndarray
    reference_energy: float | None = None
    identifier: str = ""

    def __post_init__(self):
        self.atomic_numbers = np.asarray(self.atomic_numbers, dtype=np.int64).reshape(-1)
        self.coordinates = np.asarray(self.coordinates, dtype=np.float64).reshape(-1, 3)
        if len(self.atomic_numbers) < 1:
            raise DatasetError("a configuration needs at least one atom")
        if len(self.atomic_numbers) != len(self.coordinates):
            raise DatasetError(
                f"{len(self.atomic_numbers)} atomic numbers but "
                f"{len(self.coordinates)} coordinate rows"
            )
        if np.any(self.atomic_numbers < 1):
            raise DatasetError("atomic numbers must be positive")
        if self.reference_energy is not None:
            self.reference_energy = float(self.reference_energy)

    @property
    def n_atoms(self) -> int:
        return len(self.atomic_numbers)

    def check_species(self, species: SpeciesTable) -> None:
        for z in self.atomic_numbers:
            if z not in species:
                raise SpeciesError(int(z), species)


@dataclass
class DatasetSplit:
    train: list[MolecularConfiguration]
    validate: list[MolecularConfiguration]
    test: list[MolecularConfiguration]
    seed: int
    manifest: dict[str, str] = field(default_factory=dict)


def _parse_comment(line: str) -> dict[str, str]:
    try:
        tokens = shlex.split(line)
    except ValueError:
        tokens = line.split()
    props = {}
    for tok in tokens:
        if "=" in tok:
            key, _, value = tok.partition("=")
            props[key.strip().lower()] = value.strip()
    return props


def _float(text: str) -> float:
    # Mathematica-style exponents ("1.2*^-6") appear in QM9 files.
    return float(text.replace("*^", "e"))


def parse_extended_xyz(
    text: str,
    species: SpeciesTable | None = SpeciesTable(),
    energy_key: str = "energy",
    default_energy_unit: str = "hartree",
    default_length_unit: str = "angstrom",
) -> list[MolecularConfiguration]:
    """Parse a concatenation of extended-XYZ frames.

    Each frame is an atom-count line, a comment line and one ``symbol x y z``
    line per atom (extra columns are ignored). Recognised comment-line keys:

    ``energy`` (or `energy_key`)
        molecular energy, Hartree unless ``energy_unit`` says otherwise
    ``energy_unit``
        one of ``hartree``, ``kcal/mol``, ``ev``
    ``pos_unit``
        ``angstrom`` (default) or ``bohr``
    ``id``
        identifier; defaults to ``frame<index>``

    Returns configurations in Bohr and kcal/mol, in file order. If
    `species` is given, atoms outside the table raise :class:`SpeciesError`.
    """
    lines = text.splitlines()
    configs = []
    pos = 0
    frame = 0
    energy_key = energy_key.lower()
    while pos < len(lines):
        if not lines[pos].strip():
            pos += 1
            continue
        count_line = pos + 1
        try:
            n_atoms = int(lines[pos].strip())
        except ValueError:
            raise XYZParseError(f"malformed atom count {lines[pos].strip()!r}", frame, count_line) from None
        if n_atoms < 1:
            raise XYZParseError(f"malformed atom count {n_atoms}", frame, count_line)
        if pos + 2 + n_atoms > len(lines):
            raise XYZParseError(f"expected {n_atoms} atom lines, file ended", frame, count_line)
        props = _parse_comment(lines[pos + 1])

        length_unit = props.get("pos_unit", default_length_unit).lower()
        energy_unit = props.get("energy_unit", default_energy_unit).lower()
        if length_unit not in _LENGTH_UNITS:
            raise XYZParseError(f"unknown length unit {length_unit!r}", frame, pos + 2)
        if energy_unit not in _ENERGY_UNITS:
            raise XYZParseError(f"unknown energy unit {energy_unit!r}", frame, pos + 2)

        numbers = np.empty(n_atoms, dtype=np.int64)
        coords = np.empty((n_atoms, 3))
        for k in range(n_atoms):
            lineno = pos + 3 + k
            parts = lines[pos + 2 + k].split()
            if len(parts) < 4:
                raise XYZParseError(f"expected 'symbol x y z', got {lines[pos + 2 + k]!r}", frame, lineno)
            sym = parts[0]
            if sym not in ATOMIC_NUMBERS:
                raise UnknownElementError(sym, frame, lineno)
            numbers[k] = ATOMIC_NUMBERS[sym]
            try:
                coords[k] = [_float(v) for v in parts[1:4]]
            except ValueError:
                raise XYZParseError(f"non-numeric coordinate in {parts[1:4]}", frame, lineno) from None

        energy = None
        if energy_key in props:
            try:
                energy = _float(props[energy_key]) * _ENERGY_UNITS[energy_unit]
            except ValueError:
                raise XYZParseError(f"non-numeric energy {props[energy_key]!r}", frame, pos + 2) from None

        config = MolecularConfiguration(
            numbers,
            coords * _LENGTH_UNITS[length_unit],
            energy,
            props.get("id", f"frame{frame}"),
        )
        if species is not None:
            config.check_species(species)
        configs.append(config)
        pos += 2 + n_atoms
        frame += 1
    return configs


def read_extended_xyz(path: str | os.PathLike, species: SpeciesTable | None = SpeciesTable(), **kwargs):
    return parse_extended_xyz(Path(path).read_text(), species, **kwargs)


def format_extended_xyz(configs: Sequence[MolecularConfiguration], decimals: int = 10) -> str:
    """Serialize configurations in Bohr / kcal/mol with explicit unit keys."""
    out = []
    for c in configs:
        out.append(str(c.n_atoms))
        comment = [f"id={shlex.quote(c.identifier)}", "pos_unit=bohr", "energy_unit=kcal/mol"]
        if c.reference_energy is not None:
            comment.append(f"energy={c.reference_energy:.{decimals}f}")
        out.append(" ".join(comment))
        for z, xyz in zip(c.atomic_numbers, c.coordinates):
            out.append(f"{ELEMENTS[z - 1]} " + " ".join(f"{v:.{decimals}f}" for v in xyz))
    return "\n".join(out) + "\n"


def parse_qm9_record(text: str, species: SpeciesTable | None = SpeciesTable(),
                     energy_column: int = QM9_U0_COLUMN,
                     atom_reference: dict[int, float] | None = QM9_ATOM_U0) -> MolecularConfiguration:
    """Parse one ``dsgdb9nsd_*.xyz`` file of the QM9 distribution.

    The identifier is the integer molecule index as a string ("1" .. "133885"),
    which is how the published exclusion lists refer to molecules. The energy
    is U_0 by default; with `atom_reference` (Hartree per element) the sum of
    free-atom energies is subtracted, giving the atomization energy. Pass
    ``atom_reference=None`` for the raw total energy.
    """
    lines = text.splitlines()
    try:
        n_atoms = int(lines[0].strip())
    except (ValueError, IndexError):
        raise XYZParseError("malformed atom count", 0, 1) from None
    fields = lines[1].split()
    if len(fields) <= energy_column:
        raise XYZParseError("property line too short", 0, 2)
    ident = fields[1]
    energy = _float(fields[energy_column])
    numbers = np.empty(n_atoms, dtype=np.int64)
    coords = np.empty((n_atoms, 3))
    for k in range(n_atoms):
        parts = lines[2 + k].split()
        if parts[0] not in ATOMIC_NUMBERS:
            raise UnknownElementError(parts[0], 0, 3 + k)
        numbers[k] = ATOMIC_NUMBERS[parts[0]]
        try:
            coords[k] = [_float(v) for v in parts[1:4]]
        except ValueError:
            raise XYZParseError(f"non-numeric coordinate in {parts[1:4]}", 0, 3 + k) from None
    if atom_reference is not None:
        try:
            energy -= sum(atom_reference[int(z)] for z in numbers)
        except KeyError as exc:
            raise DatasetError(f"molecule {ident}: no atomic reference energy for Z={exc.args[0]}") from None
    energy *= HARTREE_TO_KCAL
    config = MolecularConfiguration(numbers, coords * ANGSTROM_TO_BOHR, energy, ident)
    if species is not None:
        config.check_species(species)
    return config


def load_qm9(directory: str | os.PathLike, species: SpeciesTable | None = SpeciesTable(),
             limit: int | None = None, **kwargs) -> list[MolecularConfiguration]:
    """Load every ``*.xyz`` record in a QM9 directory, sorted by file name."""
    paths = sorted(Path(directory).glob("*.xyz"))
    if limit is not None:
        paths = paths[:limit]
    return [parse_qm9_record(p.read_text(), species, **kwargs) for p in paths]


def read_exclusion_file(path: str | os.PathLike) -> list[str]:
    """One identifier per line; '#' starts a comment; blank lines ignored.

    Only the first whitespace-separated token on a line is used, so the
    published QM9 lists (index followed by extra columns) can be used as-is.
    """
    ids = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            ids.append(line.split()[0])
    return ids


def apply_exclusion_list(data: Sequence[MolecularConfiguration],
                         exclusions: Iterable[str]) -> list[MolecularConfiguration]:
    excluded = set(exclusions)
    kept = [c for c in data if c.identifier not in excluded]
    removed = len(data) - len(kept)
    unknown = excluded - {c.identifier for c in data}
    if unknown:
        logger.warning("%d excluded identifiers not present in the dataset", len(unknown))
    logger.info("exclusion list removed %d of %d configurations", removed, len(data))
    return kept


def compute_sigma_E(data: Sequence[MolecularConfiguration]) -> float:
    """Population standard deviation of the reference energies (kcal/mol)."""
    if len(data) == 0:
        raise DatasetError("cannot compute sigma_E of an empty dataset")
    energies = reference_energies(data)
    return float(np.sqrt(np.mean((energies - energies.mean()) ** 2)))


def reference_energies(data: Sequence[MolecularConfiguration]) -> np.ndarray:
    missing = [c.identifier for c in data if c.reference_energy is None]
    if missing:
        raise DatasetError(f"{len(missing)} configurations lack a reference energy, e.g. {missing[0]!r}")
    return np.array([c.reference_energy for c in data], dtype=np.float64)


def split_dataset(data: Sequence[MolecularConfiguration], n_train: int, n_validate: int,
                  seed: int) -> DatasetSplit:
    """Random disjoint train/validate/test split; test gets the remainder.

    The order is a permutation drawn from ``numpy.random.Generator(PCG64(seed))``,
    which numpy guarantees to be stream-stable across platforms.
    """
    if n_train < 0 or n_validate < 0:
        raise DatasetError("split sizes must be non-negative")
    if n_train + n_validate > len(data):
        raise DatasetError(
            f"insufficient data: {n_train} train + {n_validate} validate > {len(data)} configurations"
        )
    idents = [c.identifier for c in data]
    if len(set(idents)) != len(idents):
        raise DatasetError("configuration identifiers must be unique to split")
    order = np.random.Generator(np.random.PCG64(seed)).permutation(len(data))
    pick = lambda idx: [data[i] for i in idx]
    return DatasetSplit(
        train=pick(order[:n_train]),
        validate=pick(order[n_train:n_train + n_validate]),
        test=pick(order[n_train + n_validate:]),
        seed=seed,
    )


def write_manifest(path: str | os.PathLike, split: DatasetSplit, **entries) -> None:
    """Key-value provenance record written next to every split."""
    record = {
        "seed": split.seed,
        "n_train": len(split.train),
        "n_validate": len(split.validate),
        "n_test": len(split.test),
        "prng": "numpy PCG64 permutation",
        "length_unit": "bohr (angstrom inputs scaled by %r)" % ANGSTROM_TO_BOHR,
        "energy_unit": "kcal/mol (hartree inputs scaled by %r)" % HARTREE_TO_KCAL,
    }
    record.update(split.manifest)
    record.update(entries)
    with open(path, "w") as fh:
        for key, value in record.items():
            fh.write(f"{key} = {value}\n")
