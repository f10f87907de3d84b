"""
Reading molecules and splitting a dataset
=========================================

Extended-XYZ in, Bohr and kcal/mol inside.
"""
import numpy as np

from hipnn.dataset import compute_sigma_E, format_extended_xyz, parse_extended_xyz, split_dataset
from hipnn.toydata import make_molecules

# a water molecule in Angstrom with a Hartree energy in the comment line
text = """3
energy=-76.4 id=water
O  0.000  0.000  0.117
H  0.000  0.757 -0.470
H  0.000 -0.757 -0.470
"""
(water,) = parse_extended_xyz(text)
print(water.identifier, water.atomic_numbers, "energy (kcal/mol):", round(water.reference_energy, 3))

# coordinates are now in Bohr
oh = np.linalg.norm(water.coordinates[1] - water.coordinates[0])
print("O-H distance in Bohr:", round(oh, 4))

# writing out uses Bohr and kcal/mol, and reads back unchanged
(again,) = parse_extended_xyz(format_extended_xyz([water]))
print("round trip max coordinate change:", np.abs(again.coordinates - water.coordinates).max())

# a synthetic set stands in for QM9 here
data = make_molecules(200, seed=0)
print("sigma_E of the synthetic set (kcal/mol):", round(compute_sigma_E(data), 2))

split = split_dataset(data, n_train=120, n_validate=40, seed=7)
print("split sizes:", len(split.train), len(split.validate), len(split.test))
print("first training ids:", [c.identifier for c in split.train[:5]])
