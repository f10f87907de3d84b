"""Reverse-mode gradients of the training loss.

Each layer's adjoint is written out by hand against the cached forward
quantities of :func:`hipnn.model.forward_graph`. The whole mini-batch is one
stacked graph, so accumulation order is fixed by atom and pair order and the
result is deterministic.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit

from .dataset import MolecularConfiguration
from .geometry import GraphBuilder, MolecularGraph
from .loss import (LossBreakdown, l2_penalty, non_hierarchicality_grad,
                   non_hierarchicality_per_molecule, penalized_tensors)
from .model import ModelParameters, NonFiniteError, forward_graph, molecule_sums

GradientSet = dict  # learnable tensor name -> gradient array of the same shape

# Gathered (pairs, n_sens, n_in) blocks are built in chunks of this many entries.
_CHUNK_ENTRIES = 1 << 22


@dataclass(frozen=True)
class LossConfig:
    lambda_l2: float = 1e-6
    lambda_r: float = 1e-2


def _sensitivity_adjoint(d_env, z, first, second, n_sens):
    """ds[p, nu] = sum_b d_env[first_p, nu, b] * z[second_p, b]."""
    n_pairs = len(first)
    n_in = z.shape[1]
    d_env = d_env.reshape(-1, n_sens, n_in)
    ds = np.empty((n_pairs, n_sens))
    step = max(1, _CHUNK_ENTRIES // max(1, n_sens * n_in))
    for start in range(0, n_pairs, step):
        sl = slice(start, start + step)
        ds[sl] = np.einsum("pkb,pb->pk", d_env[first[sl]], z[second[sl]])
    return ds


def backward_graph(graph: MolecularGraph, params: ModelParameters, caches, taps,
                   d_energies: np.ndarray) -> GradientSet:
    """Gradients of a scalar with respect to every learnable tensor,
    given its derivative `d_energies` w.r.t. the per-atom, per-order energies."""
    hyper = params.hyper
    T = params.tensors
    grads: GradientSet = {}

    for n in range(1, hyper.n_interaction + 1):
        g = d_energies[:, n]
        grads[f"energy{n}.w_tilde"] = params.sigma_E * (taps[n].T @ g)
        grads[f"energy{n}.b"] = np.asarray(g.sum())

    tap_order = {hyper.tap_layer(n): n for n in range(1, hyper.n_interaction + 1)}
    g_z = np.zeros_like(caches[-1].z_tilde)
    for l in reversed(range(hyper.n_layers)):
        c = caches[l]
        p = f"layer{l}."
        if l in tap_order:
            n = tap_order[l]
            g_z = g_z + np.outer(d_energies[:, n], params.energy_weights(n))
        grads[p + "Wt"] = g_z.T @ c.z_tilde
        grads[p + "Bt"] = g_z.sum(axis=0)
        if p + "Mt" in params.learnable:
            grads[p + "Mt"] = g_z.T @ c.z_in
        g_in = g_z @ T[p + "Mt"]
        g_pre = (g_z @ T[p + "Wt"]) * expit(c.pre)
        grads[p + "W"] = g_pre.T @ c.z_in
        grads[p + "B"] = g_pre.sum(axis=0)
        g_in += g_pre @ T[p + "W"]

        if hyper.is_interaction(l):
            V = T[p + "V"]
            n_sens, n_out, n_in = V.shape
            grads[p + "V"] = (c.env.T @ g_pre).reshape(n_sens, n_in, n_out).transpose(0, 2, 1)
            Vmat = V.transpose(0, 2, 1).reshape(n_sens * n_in, n_out)
            d_env = (g_pre @ Vmat.T).reshape(-1, n_in)
            g_in += c.op.T @ d_env
            ds = _sensitivity_adjoint(d_env, c.z_in, graph.first, graph.second, n_sens)
            w = ds * c.s
            sigma_inv = T[p + "sigma_inv"]
            grads[p + "mu_inv"] = (w * c.t).sum(axis=0) / sigma_inv ** 2
            grads[p + "sigma_inv"] = (w * c.t ** 2).sum(axis=0) / sigma_inv ** 3
        g_z = g_in

    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("backward pass", name)
    return grads


def _data_term_grad(errors: np.ndarray, sigma_E: float) -> np.ndarray:
    n = len(errors)
    rmse = np.sqrt(np.mean(errors ** 2))
    # sign(0) = 0 gives the zero subgradient of |e| at the minimum
    g = np.sign(errors) / n
    if rmse > 0:
        g = g + errors / (n * rmse)
    return g / sigma_E


def loss_and_gradients_graph(graph: MolecularGraph, params: ModelParameters,
                             config: LossConfig = LossConfig(),
                             want_grads: bool = True) -> tuple[LossBreakdown, GradientSet | None, np.ndarray]:
    """Loss breakdown, gradients and molecular predictions for a stacked batch."""
    if graph.energies is None:
        raise ValueError("every molecule in the batch needs a reference energy")
    per_order, caches, taps = forward_graph(graph, params, keep_cache=want_grads)
    predicted = molecule_sums(graph, per_order).sum(axis=1)
    errors = predicted - graph.energies
    n_mol = graph.n_molecules
    sigma_E = params.sigma_E

    m = float(np.mean(np.abs(errors)))
    r = float(np.sqrt(np.mean(errors ** 2)))
    l2 = l2_penalty(params, config.lambda_l2)
    R = non_hierarchicality_per_molecule(per_order, graph.offsets)
    hier = float(config.lambda_r * R.mean())
    total = (m + r) / sigma_E + l2 + hier
    if not np.isfinite(total):
        raise NonFiniteError("loss assembly", "total loss")
    breakdown = LossBreakdown(m, r, l2, hier, total, sigma_E)
    if not want_grads:
        return breakdown, None, predicted

    d_mol = _data_term_grad(errors, sigma_E)
    d_energies = np.repeat(d_mol[graph.molecule][:, None], per_order.shape[1], axis=1)
    if config.lambda_r:
        d_energies += (config.lambda_r / n_mol) * non_hierarchicality_grad(per_order)
    grads = backward_graph(graph, params, caches, taps, d_energies)
    if config.lambda_l2:
        for name, arr in penalized_tensors(params):
            grads[name] = grads[name] + 2.0 * config.lambda_l2 * arr
    return breakdown, grads, predicted


def loss_gradients(batch: Sequence[MolecularConfiguration], params: ModelParameters,
                   config: LossConfig = LossConfig(),
                   builder: GraphBuilder | None = None) -> tuple[LossBreakdown, GradientSet]:
    if len(batch) == 0:
        raise ValueError("empty batch")
    builder = builder or GraphBuilder(params.hyper.species, params.hyper.r_cut)
    breakdown, grads, _ = loss_and_gradients_graph(builder(batch), params, config)
    return breakdown, grads


def batch_loss(batch: Sequence[MolecularConfiguration], params: ModelParameters,
               config: LossConfig = LossConfig(), builder: GraphBuilder | None = None) -> LossBreakdown:
    builder = builder or GraphBuilder(params.hyper.species, params.hyper.r_cut)
    return loss_and_gradients_graph(builder(batch), params, config, want_grads=False)[0]
