import numpy as np
import pytest

from hipnn.dataset import MolecularConfiguration, SpeciesError, SpeciesTable
from hipnn.geometry import (CoincidentAtomsError, build_graph, build_neighbor_list, one_hot_encode)

from helpers import random_molecule, random_rotation


def mol(coords, z=None):
    coords = np.asarray(coords, dtype=float)
    return MolecularConfiguration(z or [1] * len(coords), coords)


def test_one_hot_rows():
    table = SpeciesTable()
    enc = one_hot_encode(mol([[0, 0, 0], [3, 0, 0]], [1, 6]), table)
    assert enc.layer_index == 0
    np.testing.assert_array_equal(enc.values, [[1, 0, 0, 0, 0], [0, 1, 0, 0, 0]])
    with pytest.raises(SpeciesError):
        one_hot_encode(MolecularConfiguration([2], [[0, 0, 0]]), table)


def test_two_atoms_within_cutoff():
    nl = build_neighbor_list(mol([[0, 0, 0], [5, 0, 0]]), 15.0)
    assert nl.pairs == [(0, 1, 5.0), (1, 0, 5.0)]


def test_two_atoms_beyond_cutoff():
    assert len(build_neighbor_list(mol([[0, 0, 0], [20, 0, 0]]), 15.0)) == 0


def test_equilateral_triangle():
    c = mol([[0, 0, 0], [3, 0, 0], [1.5, 3 * np.sqrt(3) / 2, 0]])
    nl = build_neighbor_list(c, 15.0)
    assert len(nl) == 6
    np.testing.assert_allclose(nl.distance, 3.0, rtol=1e-15)


def test_pair_exactly_at_cutoff_excluded():
    assert len(build_neighbor_list(mol([[0, 0, 0], [15, 0, 0]]), 15.0)) == 0


def test_coincident_atoms():
    with pytest.raises(CoincidentAtomsError):
        build_neighbor_list(mol([[1, 1, 1], [0, 0, 0], [1, 1, 1]]), 15.0)
    with pytest.raises(ValueError):
        build_neighbor_list(mol([[0, 0, 0]]), 0.0)


def as_set(nl, perm=None):
    return {(int(i), int(j), round(float(r), 9)) for i, j, r in zip(nl.first, nl.second, nl.distance)}


def test_pair_symmetry_and_rigid_motion():
    rng = np.random.default_rng(4)
    c = random_molecule(rng, 12, spread=12.0)
    nl = build_neighbor_list(c, 8.0)
    s = as_set(nl)
    assert all((j, i, r) in s for i, j, r in s)
    Q = random_rotation(rng) @ np.diag([1, 1, -1])  # include a reflection
    moved = MolecularConfiguration(c.atomic_numbers, c.coordinates @ Q.T + [3.0, -7.0, 1.5])
    nl2 = build_neighbor_list(moved, 8.0)
    np.testing.assert_array_equal(nl.first, nl2.first)
    np.testing.assert_array_equal(nl.second, nl2.second)
    np.testing.assert_allclose(nl2.distance, nl.distance, rtol=1e-12)


def test_permutation_equivariance():
    rng = np.random.default_rng(5)
    c = random_molecule(rng, 9, spread=8.0)
    perm = rng.permutation(9)  # new atom k is old atom perm[k]
    inv = np.argsort(perm)
    pc = MolecularConfiguration(c.atomic_numbers[perm], c.coordinates[perm])
    old = as_set(build_neighbor_list(c, 5.0))
    new = as_set(build_neighbor_list(pc, 5.0))
    assert {(int(inv[i]), int(inv[j]), r) for i, j, r in old} == new


def test_kdtree_matches_all_pairs():
    rng = np.random.default_rng(6)
    c = MolecularConfiguration(np.ones(300, int), rng.uniform(0, 40, (300, 3)))
    a = build_neighbor_list(c, 6.0, method="all-pairs")
    b = build_neighbor_list(c, 6.0, method="kdtree")
    np.testing.assert_array_equal(a.first, b.first)
    np.testing.assert_array_equal(a.second, b.second)
    np.testing.assert_allclose(a.distance, b.distance, rtol=1e-14)


def test_stacked_graph_offsets():
    rng = np.random.default_rng(1)
    mols = [random_molecule(rng, n, energy=float(n)) for n in (2, 4, 3)]
    g = build_graph(mols, SpeciesTable(), 15.0)
    assert g.offsets.tolist() == [0, 2, 6, 9]
    assert g.molecule.tolist() == [0, 0, 1, 1, 1, 1, 2, 2, 2]
    assert np.all(g.molecule[g.first] == g.molecule[g.second])
    assert g.energies.tolist() == [2.0, 4.0, 3.0]
