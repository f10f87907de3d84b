"""Synthetic organic-like molecules with a smooth made-up energy function.

Used by the tests and demos when no quantum-chemistry dataset is on disk.
Coordinates are in Bohr, energies in kcal/mol.
"""
from __future__ import annotations

import numpy as np

from .dataset import MolecularConfiguration

# Per-species offsets (kcal/mol), on the scale of atomization energies.
DRESSED_ATOM = {1: -70.0, 6: -95.0, 7: -80.0, 8: -60.0, 9: -40.0}
_EQUILIBRIUM = {1: 1.1, 6: 1.45, 7: 1.4, 8: 1.35, 9: 1.3}  # covalent radius, Bohr


def random_geometry(rng: np.random.Generator, atomic_numbers, min_dist: float = 1.8,
                    max_tries: int = 200) -> np.ndarray:
    """Grow a connected cluster: each atom is placed at bonding distance from an earlier one."""
    coords = [np.zeros(3)]
    for k in range(1, len(atomic_numbers)):
        for _ in range(max_tries):
            anchor = coords[rng.integers(len(coords))]
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            cand = anchor + direction * rng.uniform(2.0, 2.9)
            if min(np.linalg.norm(cand - c) for c in coords) >= min_dist:
                coords.append(cand)
                break
        else:
            raise RuntimeError("could not place atom without overlap")
    return np.array(coords)


def toy_energy(atomic_numbers, coords) -> float:
    """Dressed atoms + Morse pairs + a weak three-body term."""
    z = np.asarray(atomic_numbers)
    e = sum(DRESSED_ATOM[int(a)] for a in z)
    n = len(z)
    for i in range(n):
        for j in range(i + 1, n):
            r = np.linalg.norm(coords[i] - coords[j])
            r0 = _EQUILIBRIUM[int(z[i])] + _EQUILIBRIUM[int(z[j])]
            depth = 40.0 + 5.0 * ((z[i] + z[j]) % 5)
            x = np.exp(-1.2 * (r - r0))
            e += depth * (x * x - 2 * x) * np.exp(-((r / 8.0) ** 2))
    for i in range(n):
        for j in range(n):
            for k in range(j + 1, n):
                if i in (j, k):
                    continue
                a, b = coords[j] - coords[i], coords[k] - coords[i]
                ra, rb = np.linalg.norm(a), np.linalg.norm(b)
                cos = a @ b / (ra * rb)
                e += 3.0 * cos * np.exp(-(ra + rb) / 3.0)
    return float(e)


def make_molecules(n: int, seed: int = 0, min_atoms: int = 3, max_atoms: int = 9,
                   species=(1, 6, 7, 8, 9), weights=(0.45, 0.3, 0.1, 0.1, 0.05),
                   linear: bool = False) -> list[MolecularConfiguration]:
    """`n` random molecules; `linear=True` gives energies that are exactly
    linear in species counts (dressed atoms only)."""
    rng = np.random.default_rng(seed)
    out = []
    for m in range(n):
        size = int(rng.integers(min_atoms, max_atoms + 1))
        z = rng.choice(species, size=size, p=np.asarray(weights) / np.sum(weights))
        coords = random_geometry(rng, z)
        energy = sum(DRESSED_ATOM[int(a)] for a in z) if linear else toy_energy(z, coords)
        out.append(MolecularConfiguration(z, coords, energy, f"toy{m}"))
    return out
