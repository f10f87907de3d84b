"""HIP-NN forward pass: sensitivities, interaction/on-site layers, energy readout.

Layers are numbered ``0 .. n_interaction * (1 + n_onsite) - 1``. Every block
starts with an interaction layer followed by ``n_onsite`` on-site layers, and
every layer is followed by a ResNet combination. The order-0 energy reads the
one-hot input; order ``n >= 1`` reads the output of the last layer of block n.

Parameters live in a flat, ordered ``name -> ndarray`` mapping:

=====================  ===========================  ==========================
name                   shape                        meaning
=====================  ===========================  ==========================
``layer{l}.V``         (n_sens, n_out, n_in)        sensitivity tensor
``layer{l}.mu_inv``    (n_sens,)                    inverse centers, 1/Bohr
``layer{l}.sigma_inv`` (n_sens,)                    inverse widths, 1/Bohr
``layer{l}.W``         (n_out, n_in)                self / on-site weights
``layer{l}.B``         (n_out,)                     bias
``layer{l}.Wt``        (n_out, n_out)               ResNet weights
``layer{l}.Mt``        (n_out, n_in)                ResNet pass-through
``layer{l}.Bt``        (n_out,)                     ResNet bias
``energy0.w``          (n_species,)                 dressed-atom energies
``energy0.b``          ()                           order-0 bias
``energy{n}.w_tilde``  (n_feature,)                 w = sigma_E * w_tilde
``energy{n}.b``        ()                           order-n bias, kcal/mol
=====================  ===========================  ==========================

``V``, ``mu_inv`` and ``sigma_inv`` exist only for interaction layers.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np
import scipy.sparse
from scipy.special import expit

from .dataset import MolecularConfiguration, SpeciesTable
from .geometry import GraphBuilder, MolecularGraph, NeighborList, build_graph
from .loss import non_hierarchicality, non_hierarchicality_per_molecule


class NonFiniteError(FloatingPointError):
    """A forward or backward quantity became NaN or infinite."""

    def __init__(self, where: str, tensor: str):
        super().__init__(f"non-finite values in {tensor} at {where}")
        self.where = where
        self.tensor = tensor


@dataclass(frozen=True)
class HyperParameters:
    n_interaction: int = 2
    n_onsite: int = 3
    n_feature: int = 80
    n_sensitivity: int = 20
    r_low: float = 1.7
    r_high: float = 10.0
    r_cut: float = 15.0
    species: SpeciesTable = field(default_factory=SpeciesTable)

    def __post_init__(self):
        if isinstance(self.species, (list, tuple)):
            object.__setattr__(self, "species", SpeciesTable(tuple(self.species)))
        if self.n_interaction < 1 or self.n_feature < 1 or self.n_sensitivity < 1:
            raise ValueError("n_interaction, n_feature and n_sensitivity must be >= 1")
        if self.n_onsite < 0:
            raise ValueError("n_onsite must be >= 0")
        if not 0 < self.r_low < self.r_high < self.r_cut:
            raise ValueError(
                f"need 0 < r_low < r_high < r_cut, got {self.r_low}, {self.r_high}, {self.r_cut}"
            )

    @property
    def n_layers(self) -> int:
        return self.n_interaction * (1 + self.n_onsite)

    def is_interaction(self, layer: int) -> bool:
        return layer % (1 + self.n_onsite) == 0

    def layer_widths(self, layer: int) -> tuple[int, int]:
        return (len(self.species) if layer == 0 else self.n_feature), self.n_feature

    def tap_layer(self, order: int) -> int:
        """Index of the layer whose output feeds energy order ``order >= 1``."""
        return order * (1 + self.n_onsite) - 1

    def tensor_specs(self) -> Iterator[tuple[str, tuple[int, ...], bool]]:
        """(name, shape, learnable) for every parameter tensor, in storage order."""
        for l in range(self.n_layers):
            n_in, n_out = self.layer_widths(l)
            if self.is_interaction(l):
                yield f"layer{l}.V", (self.n_sensitivity, n_out, n_in), True
                yield f"layer{l}.mu_inv", (self.n_sensitivity,), True
                yield f"layer{l}.sigma_inv", (self.n_sensitivity,), True
            yield f"layer{l}.W", (n_out, n_in), True
            yield f"layer{l}.B", (n_out,), True
            yield f"layer{l}.Wt", (n_out, n_out), True
            yield f"layer{l}.Mt", (n_out, n_in), n_in != n_out
            yield f"layer{l}.Bt", (n_out,), True
        yield "energy0.w", (len(self.species),), False
        yield "energy0.b", (), False
        for n in range(1, self.n_interaction + 1):
            yield f"energy{n}.w_tilde", (self.n_feature,), True
            yield f"energy{n}.b", (), True


@dataclass
class ModelParameters:
    """All tensors of one model plus the frozen energy scale sigma_E."""

    hyper: HyperParameters
    tensors: dict[str, np.ndarray]
    sigma_E: float
    learnable: frozenset[str] = frozenset()

    def __post_init__(self):
        specs = list(self.hyper.tensor_specs())
        for name, shape, _ in specs:
            if name not in self.tensors:
                raise ValueError(f"missing parameter tensor {name!r}")
            arr = np.asarray(self.tensors[name], dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"tensor {name!r} has shape {arr.shape}, expected {shape}")
            self.tensors[name] = arr
        if not self.learnable:
            self.learnable = frozenset(name for name, _, flag in specs if flag)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value) -> None:
        self.tensors[name] = np.asarray(value, dtype=np.float64).reshape(self.tensors[name].shape)

    def learnable_items(self) -> Iterator[tuple[str, np.ndarray]]:
        for name, arr in self.tensors.items():
            if name in self.learnable:
                yield name, arr

    def energy_weights(self, order: int) -> np.ndarray:
        """Readout weights of an energy order in kcal/mol."""
        if order == 0:
            return self.tensors["energy0.w"]
        return self.sigma_E * self.tensors[f"energy{order}.w_tilde"]

    def copy(self) -> "ModelParameters":
        return replace(self, tensors={k: v.copy() for k, v in self.tensors.items()})

    @classmethod
    def zeros(cls, hyper: HyperParameters, sigma_E: float = 1.0) -> "ModelParameters":
        """All-zero tensors except identity pass-throughs and unit sensitivities."""
        tensors = {}
        for name, shape, learn in hyper.tensor_specs():
            tensors[name] = np.zeros(shape)
            if name.endswith(".Mt") and not learn:
                tensors[name] = np.eye(shape[0])
        for l in range(hyper.n_layers):
            if hyper.is_interaction(l):
                tensors[f"layer{l}.mu_inv"] = np.linspace(1 / hyper.r_high, 1 / hyper.r_low, hyper.n_sensitivity)
                tensors[f"layer{l}.sigma_inv"] = np.full(hyper.n_sensitivity, 1 / (2 * hyper.n_sensitivity * hyper.r_low))
        return cls(hyper, tensors, sigma_E)


@dataclass
class EnergyDecomposition:
    per_atom_per_order: np.ndarray
    per_atom: np.ndarray
    total: float
    non_hierarchicality: float


def softplus(x):
    """log(1 + e^x) without overflow."""
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def cutoff_fn(r, r_cut: float):
    r = np.asarray(r, dtype=np.float64)
    return np.where(r <= r_cut, np.cos(0.5 * np.pi * r / r_cut) ** 2, 0.0)


def sensitivities(r, mu_inv, sigma_inv, r_cut: float) -> np.ndarray:
    """Inverse-distance Gaussians times the cutoff, shape ``r.shape + (n_sens,)``.

    `mu_inv` and `sigma_inv` are the inverse center distances and inverse
    widths, the form in which they are stored and trained.
    """
    r = np.asarray(r, dtype=np.float64)
    if np.any(r <= 0):
        raise ValueError("sensitivities are singular at r = 0")
    t = (1.0 / r)[..., None] - mu_inv
    return np.exp(-0.5 * (t / sigma_inv) ** 2) * cutoff_fn(r, r_cut)[..., None]


def _check_dims(z, W, what):
    if z.shape[-1] != W.shape[-1]:
        raise ValueError(f"{what}: features have width {z.shape[-1]}, weights expect {W.shape[-1]}")


def on_site_layer(z, W, B) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    _check_dims(z, W, "on-site layer")
    return softplus(z @ W.T + B)


def _pair_operator(first, second, s, n_atoms):
    """Sparse (n_atoms * n_sens, n_atoms) operator with entries s[p, nu] at (i_p, nu), j_p."""
    n_sens = s.shape[1]
    rows = (first[:, None] * n_sens + np.arange(n_sens)).ravel()
    cols = np.repeat(second, n_sens)
    return scipy.sparse.csr_matrix((s.ravel(), (rows, cols)), shape=(n_atoms * n_sens, n_atoms))


def _interaction_preactivation(z, first, second, s, V, W, B):
    n_atoms, n_in = z.shape
    n_sens, n_out, _ = V.shape
    op = _pair_operator(first, second, s, n_atoms)
    env = (op @ z).reshape(n_atoms, n_sens * n_in)
    Vmat = V.transpose(0, 2, 1).reshape(n_sens * n_in, n_out)
    return env @ Vmat + z @ W.T + B, env, op


def interaction_layer(z, pairs: NeighborList, V, mu_inv, sigma_inv, W, B) -> np.ndarray:
    """Neighbor aggregation through sensitivity functions, then softplus."""
    z = np.asarray(z, dtype=np.float64)
    _check_dims(z, W, "interaction layer")
    if V.shape[2] != z.shape[1] or V.shape[1] != W.shape[0]:
        raise ValueError(f"interaction layer: V has shape {V.shape}, features {z.shape}")
    if len(pairs):
        s = sensitivities(pairs.distance, mu_inv, sigma_inv, pairs.cutoff)
    else:
        s = np.zeros((0, V.shape[0]))
    pre, _, _ = _interaction_preactivation(z, pairs.first, pairs.second, s, V, W, B)
    return softplus(pre)


def resnet_combine(z_new, z_old, Wt, Mt, Bt) -> np.ndarray:
    z_new = np.asarray(z_new, dtype=np.float64)
    z_old = np.asarray(z_old, dtype=np.float64)
    _check_dims(z_new, Wt, "resnet (new features)")
    _check_dims(z_old, Mt, "resnet (pass-through)")
    return z_new @ Wt.T + z_old @ Mt.T + Bt


def hierarchical_energy(z, w, b) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != len(w):
        raise ValueError(f"energy readout: features have width {z.shape[-1]}, weights {len(w)}")
    return z @ w + b


@dataclass
class LayerCache:
    z_in: np.ndarray
    pre: np.ndarray
    z_tilde: np.ndarray
    # interaction layers only
    s: np.ndarray | None = None
    t: np.ndarray | None = None
    env: np.ndarray | None = None
    op: object = None


def _check_finite(arr, where, tensor):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(where, tensor)


def forward_graph(graph: MolecularGraph, params: ModelParameters,
                  keep_cache: bool = False) -> tuple[np.ndarray, list[LayerCache], list[np.ndarray]]:
    """Per-atom, per-order energies for a stacked graph.

    Returns ``(energies, caches, taps)`` where ``energies`` has shape
    ``(n_atoms, n_interaction + 1)``; caches and taps are empty unless
    `keep_cache` (they feed the backward pass).
    """
    hyper = params.hyper
    T = params.tensors
    z = graph.onehot
    energies = np.empty((graph.n_atoms, hyper.n_interaction + 1))
    energies[:, 0] = hierarchical_energy(z, T["energy0.w"], T["energy0.b"])
    caches: list[LayerCache] = []
    taps: list[np.ndarray] = [z]
    taps_at = {hyper.tap_layer(n): n for n in range(1, hyper.n_interaction + 1)}

    for l in range(hyper.n_layers):
        p = f"layer{l}."
        if hyper.is_interaction(l):
            mu_inv, sigma_inv = T[p + "mu_inv"], T[p + "sigma_inv"]
            r = graph.distance
            t = (1.0 / r)[:, None] - mu_inv
            s = np.exp(-0.5 * (t / sigma_inv) ** 2) * cutoff_fn(r, hyper.r_cut)[:, None]
            pre, env, op = _interaction_preactivation(
                z, graph.first, graph.second, s, T[p + "V"], T[p + "W"], T[p + "B"])
        else:
            pre = z @ T[p + "W"].T + T[p + "B"]
            s = t = env = op = None
        z_tilde = softplus(pre)
        z_next = z_tilde @ T[p + "Wt"].T + z @ T[p + "Mt"].T + T[p + "Bt"]
        if keep_cache:
            _check_finite(z_next, f"layer {l}", "features")
            caches.append(LayerCache(z, pre, z_tilde, s, t, env, op))
        z = z_next
        if l in taps_at:
            n = taps_at[l]
            energies[:, n] = hierarchical_energy(z, params.energy_weights(n), T[f"energy{n}.b"])
            if keep_cache:
                taps.append(z)
    if keep_cache:
        _check_finite(energies, "energy readout", "per-atom energies")
    return energies, caches, taps


def molecule_sums(graph: MolecularGraph, per_atom: np.ndarray) -> np.ndarray:
    # Sequential sum per molecule; order fixed by atom order.
    return np.add.reduceat(per_atom, graph.offsets[:-1], axis=0) if graph.n_atoms else np.zeros(0)


def forward(config: MolecularConfiguration, params: ModelParameters,
            hyper: HyperParameters | None = None) -> EnergyDecomposition:
    if hyper is not None and hyper != params.hyper:
        raise ValueError("hyperparameters do not match the parameter set")
    graph = build_graph([config], params.hyper.species, params.hyper.r_cut)
    per_order, _, _ = forward_graph(graph, params)
    per_atom = per_order.sum(axis=1)
    return EnergyDecomposition(per_order, per_atom, float(per_atom.sum()),
                               float(non_hierarchicality(per_order)))


@dataclass
class BatchPrediction:
    """Forward results for many molecules; atom rows of molecule m are
    ``offsets[m]:offsets[m+1]`` of `per_atom_per_order`."""

    total: np.ndarray
    per_order_totals: np.ndarray
    non_hierarchicality: np.ndarray
    per_atom_per_order: np.ndarray
    offsets: np.ndarray


def predict(configs, params: ModelParameters, builder: GraphBuilder | None = None,
            chunk: int = 256) -> BatchPrediction:
    """Vectorized forward over many configurations, in chunks."""
    builder = builder or GraphBuilder(params.hyper.species, params.hyper.r_cut)
    orders, rs, atoms, sizes = [], [], [], []
    for start in range(0, len(configs), chunk):
        graph = builder(configs[start:start + chunk])
        per_order, _, _ = forward_graph(graph, params)
        orders.append(molecule_sums(graph, per_order))
        rs.append(non_hierarchicality_per_molecule(per_order, graph.offsets))
        atoms.append(per_order)
        sizes.append(np.diff(graph.offsets))
    per_order_totals = np.concatenate(orders)
    return BatchPrediction(
        per_order_totals.sum(axis=1), per_order_totals, np.concatenate(rs),
        np.concatenate(atoms), np.concatenate([[0], np.cumsum(np.concatenate(sizes))]),
    )


def count_parameters(hyper: HyperParameters) -> tuple[int, int]:
    """(learnable, fixed) entry counts."""
    learnable = fixed = 0
    for _, shape, learn in hyper.tensor_specs():
        size = int(np.prod(shape, dtype=np.int64))
        if learn:
            learnable += size
        else:
            fixed += size
    return learnable, fixed
