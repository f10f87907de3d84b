"""Initialization, Adam, mini-batching, learning-rate annealing, early stopping."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dataset import DatasetSplit, MolecularConfiguration, SpeciesTable, compute_sigma_E, reference_energies
from .geometry import GraphBuilder
from .gradients import GradientSet, LossConfig, loss_and_gradients_graph
from .model import HyperParameters, ModelParameters, NonFiniteError, predict

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimizerConfig:
    eta_init: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 30
    alpha_decay: float = 0.5
    t_patience: int = 50
    t_init: int = 100
    t_max: int = 2000
    lambda_l2: float = 1e-6
    lambda_r: float = 1e-2
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.eta_init <= 0:
            raise ValueError("eta_init must be positive")
        if not 0 < self.alpha_decay < 1:
            raise ValueError("alpha_decay must lie in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def loss_config(self) -> LossConfig:
        return LossConfig(self.lambda_l2, self.lambda_r)


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def species_counts(data: Sequence[MolecularConfiguration], species: SpeciesTable) -> np.ndarray:
    counts = np.zeros((len(data), len(species)))
    for m, c in enumerate(data):
        np.add.at(counts[m], species.indices(c.atomic_numbers), 1.0)
    return counts


def fit_E0(train_data: Sequence[MolecularConfiguration], species: SpeciesTable) -> tuple[np.ndarray, float]:
    """Least-squares dressed-atom energies.

    The per-atom bias adds ``n_atoms * b0`` to a molecule, which is a linear
    combination of the species counts, so it is redundant with the per-species
    weights. It is therefore pinned to zero and the weights are the
    minimum-norm least-squares solution of ``E ~ counts @ w`` (species absent
    from the training set get zero weight).
    """
    counts = species_counts(train_data, species)
    energies = reference_energies(train_data)
    w, *_ = np.linalg.lstsq(counts, energies, rcond=None)
    return w, 0.0


def init_parameters(hyper: HyperParameters, train_data: Sequence[MolecularConfiguration],
                    seed: int) -> ModelParameters:
    if len(train_data) == 0:
        raise ValueError("cannot initialize from empty training data")
    rng = np.random.Generator(np.random.PCG64(seed))
    sigma_E = compute_sigma_E(train_data)
    if sigma_E == 0:
        logger.warning("training energies are constant; using sigma_E = 1 kcal/mol")
        sigma_E = 1.0
    params = ModelParameters.zeros(hyper, sigma_E)
    K = hyper.n_sensitivity
    for l in range(hyper.n_layers):
        n_in, n_out = hyper.layer_widths(l)
        p = f"layer{l}."
        if hyper.is_interaction(l):
            params[p + "V"] = glorot_uniform(rng, (K, n_out, n_in), K * n_in, n_out)
            # np.linspace pins both endpoints exactly
            params[p + "mu_inv"] = np.linspace(1.0 / hyper.r_high, 1.0 / hyper.r_low, K)
            params[p + "sigma_inv"] = np.full(K, 1.0 / (2 * K * hyper.r_low))
        params[p + "W"] = glorot_uniform(rng, (n_out, n_in), n_in, n_out)
        params[p + "Wt"] = glorot_uniform(rng, (n_out, n_out), n_out, n_out)
        if p + "Mt" in params.learnable:
            params[p + "Mt"] = glorot_uniform(rng, (n_out, n_in), n_in, n_out)
    w0, b0 = fit_E0(train_data, hyper.species)
    params["energy0.w"] = w0
    params["energy0.b"] = b0
    for n in range(1, hyper.n_interaction + 1):
        # Energy scale sigma_E * 10^(-2n); w = sigma_E * w_tilde.
        params[f"energy{n}.w_tilde"] = glorot_uniform(rng, hyper.n_feature, hyper.n_feature, 1) * 10.0 ** (-2 * n)
    return params


def make_minibatches(train_data: Sequence, batch_size: int, epoch_rng: np.random.Generator) -> list[list]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = epoch_rng.permutation(len(train_data))
    return [[train_data[i] for i in order[s:s + batch_size]] for s in range(0, len(order), batch_size)]


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ModelParameters) -> "AdamState":
        return cls(0, {k: np.zeros_like(a) for k, a in params.learnable_items()},
                   {k: np.zeros_like(a) for k, a in params.learnable_items()})


def adam_step(params: ModelParameters, grads: GradientSet, state: AdamState, eta: float,
              beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8) -> None:
    """Bias-corrected Adam update, in place, of the learnable tensors only."""
    for name, g in grads.items():
        if name not in params.learnable:
            raise KeyError(f"gradient supplied for fixed tensor {name!r}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("adam step", name)
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name in sorted(grads):
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        params.tensors[name] = params.tensors[name] - eta * (m / c1) / (np.sqrt(v / c2) + epsilon)


class AnnealingSchedule:
    """Plateau-driven learning-rate decay with early termination.

    Epochs are numbered from 1. After each epoch's validation score,
    :meth:`update` returns True when training should stop. The plateau window
    counts epochs since the latest of: last improvement, last decay, and
    ``t_init`` (lr is frozen until then). Reaching ``t_patience`` such epochs
    multiplies the lr by ``alpha_decay``; two decays with no improvement in
    between end training, as does reaching ``t_max``.
    """

    def __init__(self, opt: OptimizerConfig):
        self.opt = opt
        self.eta = opt.eta_init
        self.best_score = np.inf
        self.best_epoch = 0
        self.last_decay = 0
        self.decays_without_improvement = 0
        self.decay_epochs: list[int] = []
        self.stop_reason = ""
        self._epoch = 0

    @property
    def epochs_since_improvement(self) -> int:
        return self._epoch - self.best_epoch

    def update(self, epoch: int, score: float) -> bool:
        self._epoch = epoch
        improved = score < self.best_score
        if improved:
            self.best_score = score
            self.best_epoch = epoch
            self.decays_without_improvement = 0
        elif epoch - max(self.best_epoch, self.last_decay, self.opt.t_init) >= self.opt.t_patience:
            self.eta *= self.opt.alpha_decay
            self.last_decay = epoch
            self.decay_epochs.append(epoch)
            self.decays_without_improvement += 1
            if self.decays_without_improvement >= 2:
                self.stop_reason = "two decays without improvement"
                return True
        if epoch >= self.opt.t_max:
            self.stop_reason = "t_max reached"
            return True
        return False

    @property
    def improved_last(self) -> bool:
        return self.best_epoch == self._epoch


HISTORY_FIELDS = ("epoch", "train_mae", "train_rmse", "l2_term", "r_term", "validation_mae", "eta")


@dataclass
class TrainResult:
    params: ModelParameters
    history: list[dict]
    best_score: float
    stop_reason: str
    adam: AdamState
    decay_epochs: list[int]


def _validation_mae(params, data, builder) -> float:
    pred = predict(data, params, builder)
    return float(np.mean(np.abs(pred.total - reference_energies(data))))


def train(split: DatasetSplit, hyper: HyperParameters, opt: OptimizerConfig = OptimizerConfig(),
          params: ModelParameters | None = None,
          on_improvement: Callable[[int, ModelParameters, float], None] | None = None,
          on_epoch: Callable[[dict], None] | None = None,
          validation_metric: Callable[[ModelParameters, int], float] | None = None) -> TrainResult:
    """Mini-batch Adam on the regularized loss with early stopping.

    Returns the parameters with the lowest validation MAE seen. `params`
    skips initialization; `validation_metric(params, epoch)` replaces the
    validation MAE (used to exercise the schedule in isolation).
    """
    if not split.train or (not split.validate and validation_metric is None):
        raise ValueError("training needs non-empty train and validation sets")
    if params is None:
        params = init_parameters(hyper, split.train, opt.seed)
    else:
        params = params.copy()
    builder = GraphBuilder(hyper.species, hyper.r_cut)
    adam = AdamState.for_params(params)
    schedule = AnnealingSchedule(opt)
    epoch_rng = np.random.Generator(np.random.PCG64([opt.seed, 1]))
    loss_cfg = opt.loss_config
    best = params.copy()
    history: list[dict] = []
    stop_reason = ""
    warned: set[str] = set()

    for epoch in range(1, opt.t_max + 1):
        eta = schedule.eta
        abs_sum = sq_sum = l2_sum = r_sum = 0.0
        n_seen = 0
        try:
            for batch in make_minibatches(split.train, opt.batch_size, epoch_rng):
                graph = builder(batch)
                loss, grads, pred = loss_and_gradients_graph(graph, params, loss_cfg)
                err = pred - graph.energies
                abs_sum += float(np.abs(err).sum())
                sq_sum += float((err ** 2).sum())
                l2_sum += loss.l2_term * len(batch)
                r_sum += loss.hierarchicality_term * len(batch)
                n_seen += len(batch)
                adam_step(params, grads, adam, eta, opt.beta1, opt.beta2, opt.epsilon)
                _warn_invalid_sensitivities(params, warned)
            if validation_metric is not None:
                score = float(validation_metric(params, epoch))
            else:
                score = _validation_mae(params, split.validate, builder)
            if not np.isfinite(score):
                raise NonFiniteError(f"epoch {epoch}", "validation MAE")
        except NonFiniteError as exc:
            logger.error("aborting at epoch %d: %s; returning last best parameters", epoch, exc)
            stop_reason = f"non-finite: {exc}"
            break

        row = {
            "epoch": epoch,
            "train_mae": abs_sum / n_seen,
            "train_rmse": float(np.sqrt(sq_sum / n_seen)),
            "l2_term": l2_sum / n_seen,
            "r_term": r_sum / n_seen,
            "validation_mae": score,
            "eta": eta,
        }
        history.append(row)
        done = schedule.update(epoch, score)
        if schedule.improved_last:
            best = params.copy()
            if on_improvement is not None:
                on_improvement(epoch, best, score)
        if on_epoch is not None:
            on_epoch(row)
        if done:
            stop_reason = schedule.stop_reason
            break

    return TrainResult(best, history, float(schedule.best_score), stop_reason or "t_max reached",
                       adam, schedule.decay_epochs)


def _warn_invalid_sensitivities(params: ModelParameters, warned: set) -> None:
    for name, arr in params.learnable_items():
        if name.endswith(("mu_inv", "sigma_inv")) and name not in warned and np.any(arr <= 0):
            warned.add(name)
            logger.warning("%s has non-positive entries after an update", name)


def write_history(path, history: Sequence[dict]) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS)
        writer.writeheader()
        for row in history:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
