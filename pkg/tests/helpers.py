import functools

import numpy as np

from hipnn.dataset import MolecularConfiguration
from hipnn.model import HyperParameters, ModelParameters


def random_model(hyper: HyperParameters, seed: int = 0, scale: float = 0.5, sigma_E: float = 3.0) -> ModelParameters:
    """Dense random parameters; sensitivities spread over 1.5-8 Bohr with wide overlap."""
    rng = np.random.default_rng(seed)
    params = ModelParameters.zeros(hyper, sigma_E)
    for name, shape, learn in hyper.tensor_specs():
        if name.endswith("mu_inv"):
            params[name] = np.linspace(1 / 8.0, 1 / 1.5, shape[0]) + rng.uniform(-0.01, 0.01, shape)
        elif name.endswith("sigma_inv"):
            params[name] = rng.uniform(0.12, 0.25, shape)
        elif learn or name.startswith("energy0"):
            params[name] = rng.normal(0.0, scale, shape)
    return params


def random_molecule(rng, n_atoms, species=(1, 6, 7, 8, 9), spread=3.0, energy=None, ident="m"):
    while True:
        coords = rng.uniform(0, spread, (n_atoms, 3))
        d = np.linalg.norm(coords[:, None] - coords[None], axis=-1) + np.eye(n_atoms) * 10
        if d.min() > 1.0:
            break
    z = rng.choice(species, size=n_atoms)
    return MolecularConfiguration(z, coords, energy, ident)


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    return q * np.sign(np.diag(r))


@functools.lru_cache(maxsize=None)
def overfit_run(n_molecules: int = 50, n_feature: int = 20, t_max: int = 2000, seed: int = 0):
    """Train on a toy set and validate on the same molecules; cached per session."""
    from hipnn.dataset import DatasetSplit
    from hipnn.toydata import make_molecules
    from hipnn.trainer import OptimizerConfig, train

    data = make_molecules(n_molecules, seed=seed)
    split = DatasetSplit(data, data, [], seed)
    result = train(split, HyperParameters(n_feature=n_feature), OptimizerConfig(t_max=t_max, seed=seed))
    return data, result
