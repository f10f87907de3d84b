"""Symmetric molecular representation: one-hot species and cutoff pair lists."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .dataset import MolecularConfiguration, SpeciesTable

# Above this many atoms the neighbor search uses a k-d tree instead of all pairs.
KDTREE_THRESHOLD = 256


class CoincidentAtomsError(ValueError):
    def __init__(self, i: int, j: int, identifier: str = ""):
        where = f" in {identifier!r}" if identifier else ""
        super().__init__(f"atoms {i} and {j}{where} sit at identical coordinates")
        self.atoms = (i, j)


@dataclass
class FeatureMatrix:
    values: np.ndarray
    layer_index: int = 0

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)

    @property
    def shape(self):
        return self.values.shape


@dataclass
class NeighborList:
    """Directed pairs (first[p], second[p]) with separation distance[p] < cutoff."""

    first: np.ndarray
    second: np.ndarray
    distance: np.ndarray
    cutoff: float

    def __len__(self) -> int:
        return len(self.first)

    @property
    def pairs(self) -> list[tuple[int, int, float]]:
        return [(int(i), int(j), float(r)) for i, j, r in zip(self.first, self.second, self.distance)]

    @classmethod
    def empty(cls, cutoff: float) -> "NeighborList":
        return cls(np.zeros(0, np.intp), np.zeros(0, np.intp), np.zeros(0), cutoff)


def one_hot_encode(config: MolecularConfiguration, species: SpeciesTable) -> FeatureMatrix:
    idx = species.indices(config.atomic_numbers)
    values = np.zeros((config.n_atoms, len(species)))
    values[np.arange(config.n_atoms), idx] = 1.0
    return FeatureMatrix(values, 0)


def build_neighbor_list(config: MolecularConfiguration, cutoff: float,
                        method: str = "auto") -> NeighborList:
    """All directed pairs i != j with 0 < r_ij < cutoff.

    `method` is ``"all-pairs"``, ``"kdtree"`` or ``"auto"`` (k-d tree only
    for large configurations). Both produce pairs ordered by (i, j).
    """
    if cutoff <= 0:
        raise ValueError(f"cutoff must be positive, got {cutoff}")
    coords = config.coordinates
    n = len(coords)
    if method == "auto":
        method = "kdtree" if n > KDTREE_THRESHOLD else "all-pairs"

    if method == "all-pairs":
        diff = coords[:, None, :] - coords[None, :, :]
        dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        np.fill_diagonal(dist, np.inf)
        i, j = np.nonzero(dist < cutoff)
        r = dist[i, j]
    elif method == "kdtree":
        tree = cKDTree(coords)
        und = tree.query_pairs(cutoff, output_type="ndarray")
        i = np.concatenate([und[:, 0], und[:, 1]]) if len(und) else np.zeros(0, np.intp)
        j = np.concatenate([und[:, 1], und[:, 0]]) if len(und) else np.zeros(0, np.intp)
        order = np.lexsort((j, i))
        i, j = i[order], j[order]
        d = coords[i] - coords[j]
        r = np.sqrt(np.einsum("pk,pk->p", d, d))
        keep = r < cutoff
        i, j, r = i[keep], j[keep], r[keep]
    else:
        raise ValueError(f"unknown neighbor search method {method!r}")

    zero = np.nonzero(r == 0.0)[0]
    if len(zero):
        raise CoincidentAtomsError(int(i[zero[0]]), int(j[zero[0]]), config.identifier)
    return NeighborList(i.astype(np.intp), j.astype(np.intp), r, float(cutoff))


@dataclass
class MolecularGraph:
    """Several molecules stacked into one disconnected graph.

    Atoms of molecule m occupy rows ``offsets[m]:offsets[m+1]``; pair indices
    are global row numbers.
    """

    species_index: np.ndarray
    onehot: np.ndarray
    molecule: np.ndarray
    offsets: np.ndarray
    first: np.ndarray
    second: np.ndarray
    distance: np.ndarray
    energies: np.ndarray | None = None

    @property
    def n_atoms(self) -> int:
        return len(self.species_index)

    @property
    def n_molecules(self) -> int:
        return len(self.offsets) - 1


@dataclass
class _Encoded:
    species_index: np.ndarray
    pairs: NeighborList
    energy: float | None


class GraphBuilder:
    """Caches the per-molecule encoding so training batches assemble cheaply.

    Geometries never change during training, so one-hot indices and
    neighbor lists are computed once per configuration.
    """

    def __init__(self, species: SpeciesTable, cutoff: float):
        self.species = species
        self.cutoff = cutoff
        self._cache: dict[int, tuple[MolecularConfiguration, _Encoded]] = {}

    def encode(self, config: MolecularConfiguration) -> _Encoded:
        # The config itself is held in the cache so its id() stays unique.
        cached = self._cache.get(id(config))
        if cached is not None and cached[0] is config and cached[1].energy == config.reference_energy:
            return cached[1]
        enc = _Encoded(
            self.species.indices(config.atomic_numbers),
            build_neighbor_list(config, self.cutoff),
            config.reference_energy,
        )
        self._cache[id(config)] = (config, enc)
        return enc

    def __call__(self, configs: Sequence[MolecularConfiguration]) -> MolecularGraph:
        encs = [self.encode(c) for c in configs]
        sizes = np.array([len(e.species_index) for e in encs])
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        species_index = np.concatenate([e.species_index for e in encs])
        onehot = np.zeros((offsets[-1], len(self.species)))
        onehot[np.arange(offsets[-1]), species_index] = 1.0
        first = np.concatenate([e.pairs.first + o for e, o in zip(encs, offsets)])
        second = np.concatenate([e.pairs.second + o for e, o in zip(encs, offsets)])
        distance = np.concatenate([e.pairs.distance for e in encs])
        energies = None
        if all(e.energy is not None for e in encs):
            energies = np.array([e.energy for e in encs])
        return MolecularGraph(
            species_index=species_index,
            onehot=onehot,
            molecule=np.repeat(np.arange(len(encs)), sizes),
            offsets=offsets,
            first=first.astype(np.intp),
            second=second.astype(np.intp),
            distance=distance,
            energies=energies,
        )


def build_graph(configs: Sequence[MolecularConfiguration], species: SpeciesTable,
                cutoff: float) -> MolecularGraph:
    return GraphBuilder(species, cutoff)(configs)
