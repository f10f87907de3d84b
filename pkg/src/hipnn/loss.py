"""Error statistics and the regularized training objective."""
from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

if TYPE_CHECKING:
    from .model import ModelParameters


@dataclass
class LossBreakdown:
    mae: float
    rmse: float
    l2_term: float
    hierarchicality_term: float
    total: float
    sigma_E: float


def _errors(predicted, reference) -> np.ndarray:
    predicted = np.asarray(predicted, dtype=np.float64).reshape(-1)
    reference = np.asarray(reference, dtype=np.float64).reshape(-1)
    if predicted.shape != reference.shape:
        raise ValueError(f"length mismatch: {predicted.shape[0]} predictions, {reference.shape[0]} references")
    if predicted.size == 0:
        raise ValueError("empty input")
    return predicted - reference


def mae(predicted, reference) -> float:
    return float(np.mean(np.abs(_errors(predicted, reference))))


def rmse(predicted, reference) -> float:
    return float(np.sqrt(np.mean(_errors(predicted, reference) ** 2)))


def penalized_tensors(params: "ModelParameters"):
    """Tensors entering the L2 penalty: learnable weights, never biases or sensitivities.

    For the energy readout the dimensionless ``w_tilde`` is used, which equals
    ``w / sigma_E``.
    """
    for name, arr in params.learnable_items():
        kind = name.rsplit(".", 1)[1]
        if kind in ("V", "W", "Wt", "Mt", "w_tilde"):
            yield name, arr


def l2_penalty(params: "ModelParameters", lambda_l2: float) -> float:
    if lambda_l2 < 0:
        raise ValueError("lambda_l2 must be non-negative")
    return float(lambda_l2 * sum(float(np.sum(a * a)) for _, a in penalized_tensors(params)))


def _ratio_terms(per_atom_per_order: np.ndarray) -> np.ndarray:
    cur = per_atom_per_order[:, 1:] ** 2
    prev = per_atom_per_order[:, :-1] ** 2
    denom = cur + prev
    # 0/0 is a perfectly converged hierarchy and contributes nothing.
    safe = np.where(denom > 0, denom, 1.0)
    return np.where(denom > 0, cur / safe, 0.0)


def non_hierarchicality(per_atom_per_order) -> float:
    """R of one molecule from its ``(n_atoms, n_orders)`` energy table."""
    e = np.atleast_2d(np.asarray(per_atom_per_order, dtype=np.float64))
    if e.shape[1] < 2:
        raise ValueError("non-hierarchicality needs at least two orders")
    return float(_ratio_terms(e).sum())


def non_hierarchicality_per_molecule(per_atom_per_order: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    per_atom = _ratio_terms(per_atom_per_order).sum(axis=1)
    return np.add.reduceat(per_atom, offsets[:-1]) if len(per_atom) else np.zeros(len(offsets) - 1)


def non_hierarchicality_grad(per_atom_per_order: np.ndarray) -> np.ndarray:
    """d(sum of R terms)/dE for every entry of the energy table."""
    e = per_atom_per_order
    cur, prev = e[:, 1:], e[:, :-1]
    denom = cur ** 2 + prev ** 2
    safe = np.where(denom > 0, denom, 1.0) ** 2
    d_cur = np.where(denom > 0, 2 * cur * prev ** 2 / safe, 0.0)
    d_prev = np.where(denom > 0, -2 * prev * cur ** 2 / safe, 0.0)
    grad = np.zeros_like(e)
    grad[:, 1:] += d_cur
    grad[:, :-1] += d_prev
    return grad


def total_loss(predicted, reference, decomps: Sequence[np.ndarray], params: "ModelParameters",
               lambda_l2: float, lambda_r: float, sigma_E: float) -> LossBreakdown:
    """Batch loss: (MAE + RMSE) / sigma_E + L2 penalty + lambda_r * mean R.

    `decomps` holds one ``(n_atoms, n_orders)`` energy table per molecule.
    """
    if sigma_E <= 0:
        raise ValueError("sigma_E must be positive")
    if len(decomps) != len(np.atleast_1d(predicted)):
        raise ValueError("one energy decomposition per prediction is required")
    m, r = mae(predicted, reference), rmse(predicted, reference)
    l2 = l2_penalty(params, lambda_l2)
    hier = float(lambda_r * np.mean([non_hierarchicality(d) for d in decomps]))
    return LossBreakdown(m, r, l2, hier, (m + r) / sigma_E + l2 + hier, sigma_E)
