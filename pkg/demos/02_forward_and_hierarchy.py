"""
Energies order by order
=======================

One forward pass gives per-atom energies for every hierarchy order, and
their sum is the molecular energy.
"""
import numpy as np

from hipnn.model import HyperParameters, count_parameters, forward
from hipnn.toydata import make_molecules
from hipnn.trainer import init_parameters

hyper = HyperParameters(n_feature=20)
learnable, fixed = count_parameters(hyper)
print(f"n_feature=20: {learnable} learnable and {fixed} fixed entries")

for n_feature in (5, 10, 20, 40, 60, 80):
    print(f"  n_feature={n_feature:<3d} learnable={count_parameters(HyperParameters(n_feature=n_feature))[0]}")

data = make_molecules(30, seed=1)
params = init_parameters(hyper, data, seed=0)
mol = data[0]
d = forward(mol, params)

# rows are atoms, columns are orders 0, 1, 2
np.set_printoptions(precision=4, suppress=True)
print(d.per_atom_per_order)
print("total:", d.total, "reference:", mol.reference_energy)
print("order sums:", d.per_atom_per_order.sum(axis=0))

# freshly initialized readouts are scaled by 10^-2n, so the hierarchy already decays
print("non-hierarchicality R:", d.non_hierarchicality)
