import math

import numpy as np
import pytest

from hipnn.dataset import DatasetSplit, MolecularConfiguration, compute_sigma_E
from hipnn.model import HyperParameters, ModelParameters, predict
from hipnn.toydata import make_molecules
from hipnn.trainer import (AdamState, AnnealingSchedule, OptimizerConfig, adam_step, fit_E0, init_parameters,
                           make_minibatches, species_counts, train)

from helpers import overfit_run, random_molecule

SMALL = HyperParameters(n_interaction=2, n_onsite=1, n_feature=4, n_sensitivity=5)
COUNTS = {1: -0.5, 6: -38.0, 7: -54.6, 8: -75.1, 9: -99.7}


def linear_data(n, seed):
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        m = random_molecule(rng, int(rng.integers(1, 8)), ident=str(k))
        m.reference_energy = float(sum(COUNTS[z] for z in m.atomic_numbers))
        out.append(m)
    return out


def test_fit_E0_hydrogen_chain():
    h2 = MolecularConfiguration([1, 1], [[0, 0, 0], [1.4, 0, 0]], -2.0, "h2")
    h4 = MolecularConfiguration([1] * 4, [[0, 0, 0], [1.4, 0, 0], [5, 0, 0], [6.4, 0, 0]], -4.0, "h4")
    w, b = fit_E0([h2, h4], SMALL.species)
    assert w[0] == pytest.approx(-1.0, rel=1e-14)
    assert np.all(w[1:] == 0.0) and b == 0.0


def test_fit_E0_single_molecule_residual():
    m = MolecularConfiguration([6, 1, 1], [[0, 0, 0], [2, 0, 0], [0, 2, 0]], -17.0, "x")
    w, b = fit_E0([m], SMALL.species)
    assert species_counts([m], SMALL.species) @ w + 3 * b == pytest.approx([-17.0], abs=1e-12)


def test_fit_E0_normal_equations_oracle():
    rng = np.random.default_rng(3)
    data = [random_molecule(rng, int(rng.integers(1, 9)), energy=float(rng.normal(-300, 50)), ident=str(k))
            for k in range(100)]
    w, _ = fit_E0(data, SMALL.species)
    A = species_counts(data, SMALL.species)
    E = np.array([m.reference_energy for m in data])
    oracle = np.linalg.solve(A.T @ A, A.T @ E)
    np.testing.assert_allclose(w, oracle, rtol=1e-8)


def test_init_sensitivity_endpoints_and_width():
    h = HyperParameters(n_feature=8)
    params = init_parameters(h, linear_data(10, 0), seed=0)
    mu = params["layer0.mu_inv"]
    assert mu[0] == 1 / 10 and mu[-1] == 1 / 1.7
    assert {1 / 1.7, 1 / 10} == {float(mu.max()), float(mu.min())}
    assert np.all(1.0 / params["layer4.sigma_inv"] == 68.0)


def test_init_linear_data_has_zero_mae():
    data = linear_data(40, 1)
    params = init_parameters(SMALL, data, seed=2)
    pred = predict(data, params).per_order_totals[:, 0]
    assert np.max(np.abs(pred - [m.reference_energy for m in data])) < 1e-9


def test_init_energy_scales():
    data = make_molecules(30, seed=4)
    params = init_parameters(SMALL, data, seed=0)
    assert params.sigma_E == compute_sigma_E(data)
    scales = [np.abs(params[f"energy{n}.w_tilde"]).max() for n in (1, 2)]
    assert scales[0] < np.sqrt(6 / 5) * 1e-2 and scales[1] < np.sqrt(6 / 5) * 1e-4


def test_init_deterministic():
    data = linear_data(10, 0)
    a, b = init_parameters(SMALL, data, 5), init_parameters(SMALL, data, 5)
    assert all(np.array_equal(a[k], b[k]) for k in a.tensors)


def test_minibatch_sizes():
    rng = np.random.default_rng(0)
    assert [len(b) for b in make_minibatches(list(range(90)), 30, rng)] == [30, 30, 30]
    assert [len(b) for b in make_minibatches(list(range(91)), 30, rng)] == [30, 30, 30, 1]


def test_minibatch_reshuffles_reproducibly():
    def two_epochs():
        rng = np.random.Generator(np.random.PCG64([0, 1]))
        return [make_minibatches(list(range(20)), 5, rng) for _ in range(2)]

    e1, e2 = two_epochs()
    assert e1 != e2
    assert two_epochs() == [e1, e2]
    assert sorted(sum(e1, [])) == list(range(20))


def reference_adam(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Line-by-line transcription of the published Adam pseudo-code for a scalar."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        theta = theta - lr * m_hat / (math.sqrt(v_hat) + eps)
    return theta


def test_adam_matches_reference_algorithm():
    params = ModelParameters.zeros(SMALL)
    state = AdamState.for_params(params)
    seq = [0.3, -2.0, 5e-3, 1.7]
    for g in seq:
        adam_step(params, {"energy1.b": np.asarray(g)}, state, 1e-3)
    assert float(params["energy1.b"]) == pytest.approx(reference_adam(0.0, seq, 1e-3), rel=1e-13)


def test_adam_first_step_is_sign():
    params = ModelParameters.zeros(SMALL)
    state = AdamState.for_params(params)
    adam_step(params, {"energy1.b": np.asarray(-40.0), "energy2.b": np.asarray(1e-3)}, state, 1e-3)
    assert float(params["energy1.b"]) == pytest.approx(1e-3, rel=1e-9)
    assert float(params["energy2.b"]) == pytest.approx(-1e-3, rel=1e-4)


def test_adam_zero_gradient_leaves_parameters():
    params = ModelParameters.zeros(SMALL)
    params["layer1.W"] = np.full((4, 4), 0.25)
    before = params.copy()
    state = AdamState.for_params(params)
    adam_step(params, {k: np.zeros_like(a) for k, a in params.learnable_items()}, state, 1e-3)
    assert all(np.array_equal(params[k], before[k]) for k in params.tensors)


def test_adam_rejects_fixed_tensor_gradient():
    params = ModelParameters.zeros(SMALL)
    with pytest.raises(KeyError):
        adam_step(params, {"energy0.w": np.zeros(5)}, AdamState.for_params(params), 1e-3)
    assert set(AdamState.for_params(params).m) == set(params.learnable)


def test_optimizer_config_validation():
    for bad in ({"beta1": 1.0}, {"eta_init": 0.0}, {"alpha_decay": 1.0}, {"batch_size": 0}):
        with pytest.raises(ValueError):
            OptimizerConfig(**bad)


def run_schedule(scores, **kw):
    sched = AnnealingSchedule(OptimizerConfig(**kw))
    etas = []
    for epoch, score in enumerate(scores, start=1):
        etas.append(sched.eta)
        if sched.update(epoch, score):
            return sched, epoch, etas
    return sched, len(scores), etas


def test_schedule_constant_metric_golden_trace():
    sched, stopped, etas = run_schedule([1.0] * 2000)
    assert sched.decay_epochs == [150, 200]
    assert stopped == 200
    assert sched.stop_reason == "two decays without improvement"
    assert etas[149] == 1e-3 and etas[150] == 5e-4


def test_schedule_strict_improvement_runs_to_t_max():
    sched, stopped, etas = run_schedule([1.0 / k for k in range(1, 400)], t_max=300)
    assert sched.decay_epochs == [] and stopped == 300 and set(etas) == {1e-3}
    assert sched.stop_reason == "t_max reached"


def test_schedule_improvement_resets_decay_counter():
    # plateau, one decay at 150, improvement at 170, then plateau again
    scores = [1.0] * 169 + [0.5] * 500
    sched, stopped, _ = run_schedule(scores)
    assert sched.decay_epochs == [150, 220, 270]
    assert stopped == 270


def test_schedule_never_decays_before_t_init():
    sched, _, _ = run_schedule([1.0] * 120, t_patience=5, t_max=120)
    assert sched.decay_epochs[0] == 105


def tiny_split(n=24, seed=0):
    data = make_molecules(n, seed=seed, max_atoms=5)
    return DatasetSplit(data[:16], data[16:], [], seed)


def test_training_deterministic():
    split = tiny_split()
    opt = OptimizerConfig(t_max=6, batch_size=5, seed=3)
    h = HyperParameters(n_feature=4, n_sensitivity=4, n_onsite=1)
    a, b = train(split, h, opt), train(split, h, opt)
    assert a.history == b.history
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params.tensors)


def test_training_history_invariants():
    split = tiny_split()
    opt = OptimizerConfig(t_max=30, t_init=5, t_patience=3, batch_size=8, eta_init=1e-2)
    res = train(split, HyperParameters(n_feature=4, n_sensitivity=4, n_onsite=1), opt)
    assert len(res.history) == res.history[-1]["epoch"]
    best = np.minimum.accumulate([row["validation_mae"] for row in res.history])
    assert res.best_score == best[-1]
    for row in res.history:
        k = math.log(row["eta"] / opt.eta_init) / math.log(opt.alpha_decay)
        assert abs(k - round(k)) < 1e-9
        if row["epoch"] <= opt.t_init:
            assert row["eta"] == opt.eta_init
    # the snapshot reproduces the best score
    pred = predict(split.validate, res.params).total
    score = float(np.mean(np.abs(pred - [m.reference_energy for m in split.validate])))
    assert score == pytest.approx(res.best_score, rel=1e-10)


def test_training_requires_data():
    with pytest.raises(ValueError):
        train(DatasetSplit([], [], [], 0), SMALL)


@pytest.mark.slow
def test_overfit_toy_set():
    data, res = overfit_run()
    pred = predict(data, res.params).total
    train_mae = float(np.mean(np.abs(pred - [m.reference_energy for m in data])))
    assert train_mae < 0.1
    assert train_mae == pytest.approx(res.best_score, rel=1e-10)
