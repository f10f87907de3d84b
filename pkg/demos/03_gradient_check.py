"""
Checking the hand-written gradients
===================================

Central finite differences against the analytic adjoints, tensor by tensor.
"""
import numpy as np

from hipnn.dataset import MolecularConfiguration
from hipnn.gradients import LossConfig, batch_loss, loss_gradients
from hipnn.model import HyperParameters, ModelParameters

hyper = HyperParameters(n_interaction=2, n_onsite=1, n_feature=4, n_sensitivity=5)
rng = np.random.default_rng(0)

# random but well-behaved parameters
params = ModelParameters.zeros(hyper, sigma_E=3.0)
for name, shape, learnable in hyper.tensor_specs():
    if name.endswith("mu_inv"):
        params[name] = np.linspace(1 / 8, 1 / 1.5, shape[0])
    elif name.endswith("sigma_inv"):
        params[name] = rng.uniform(0.12, 0.25, shape)
    elif learnable or name.startswith("energy0"):
        params[name] = rng.normal(0, 0.5, shape)

batch = [
    MolecularConfiguration([6, 1, 1], [[0, 0, 0], [2.0, 0, 0], [0, 2.1, 0.3]], -3.0, "a"),
    MolecularConfiguration([8, 1, 7, 1, 6], rng.uniform(0, 4, (5, 3)) + np.arange(5)[:, None], 1.0, "b"),
]
config = LossConfig(lambda_l2=1e-2, lambda_r=0.5)
loss, grads = loss_gradients(batch, params, config)
print("loss:", loss.total)

h = 1e-4
for name in sorted(grads):
    arr = params.tensors[name]
    idx = np.unravel_index(rng.integers(arr.size), arr.shape)
    orig = arr[idx]
    arr[idx] = orig + h
    up = batch_loss(batch, params, config).total
    arr[idx] = orig - h
    down = batch_loss(batch, params, config).total
    arr[idx] = orig
    fd = (up - down) / (2 * h)
    an = grads[name][idx]
    print(f"{name:20s} analytic {an: .6e}  fd {fd: .6e}  rel {abs(an - fd) / (abs(an) + abs(fd) + 1e-8):.1e}")
