"""Acceptance suite: one test (or a pair) per criterion.

A summary line per criterion is printed at the end of the pytest run. Criteria
needing QM9 or the benzene trajectory read their locations from environment
variables and skip with an explicit notice when they are absent:

    HIPNN_QM9_DIR          directory of QM9 ``*.xyz`` records
    HIPNN_QM9_EXCLUSIONS   exclusion list (uncharacterized plus unconverged ids)
    HIPNN_BENZENE_XYZ      extended-XYZ benzene trajectory, energies in kcal/mol
    HIPNN_RUN_EXTENDED=1   opt in to the multi-hour training runs
"""
import os

import numpy as np
import pytest

from hipnn.analysis import evaluate, mean_abs_order_energies, rank_correlation, truncation_curve
from hipnn.dataset import (DatasetSplit, MolecularConfiguration, apply_exclusion_list, compute_sigma_E, load_qm9,
                           read_exclusion_file, read_extended_xyz, split_dataset)
from hipnn.gradients import LossConfig, batch_loss, loss_gradients
from hipnn.model import HyperParameters, count_parameters, forward, predict
from hipnn.persistence import Checkpoint, load_checkpoint, save_checkpoint
from hipnn.toydata import make_molecules
from hipnn.trainer import OptimizerConfig, fit_E0, init_parameters, species_counts, train

from helpers import overfit_run, random_model, random_molecule, random_rotation

criterion = pytest.mark.criterion

QM9_DIR = os.environ.get("HIPNN_QM9_DIR", "")
QM9_EXCLUSIONS = os.environ.get("HIPNN_QM9_EXCLUSIONS", "")
BENZENE = os.environ.get("HIPNN_BENZENE_XYZ", "")
EXTENDED = os.environ.get("HIPNN_RUN_EXTENDED") == "1"


def need_qm9():
    if not QM9_DIR or not os.path.isdir(QM9_DIR):
        pytest.skip("QM9 not on disk; set HIPNN_QM9_DIR to the directory of QM9 .xyz records")


def need_extended():
    if not EXTENDED:
        pytest.skip("multi-hour run; set HIPNN_RUN_EXTENDED=1 to enable")


def pruned_qm9():
    data = load_qm9(QM9_DIR)
    if QM9_EXCLUSIONS:
        data = apply_exclusion_list(data, read_exclusion_file(QM9_EXCLUSIONS))
    return data


def rel(a, b):
    return abs(a - b) / max(abs(a), abs(b))


# Learnable-parameter counts as printed in the reference table ("k" notation).
TABLE_COUNTS = {5: 1.6e3, 10: 4.9e3, 20: 17e3, 40: 61e3, 60: 134e3, 80: 234e3}


@criterion(1, "parameter counts within 2% of the reference table")
def test_criterion_1_parameter_counts():
    deviations = {}
    for n_feature, target in TABLE_COUNTS.items():
        learnable, _ = count_parameters(HyperParameters(n_onsite=3, n_feature=n_feature))
        deviations[n_feature] = (learnable, (learnable - target) / target)
    failing = {f: f"{n} ({100 * d:+.2f}%)" for f, (n, d) in deviations.items() if abs(d) >= 0.02}
    assert not failing, f"outside 2%: {failing}"


@criterion(2, "analytic gradients match central finite differences")
def test_criterion_2_gradients():
    hyper = HyperParameters(n_interaction=2, n_onsite=1, n_feature=4, n_sensitivity=5)
    rng = np.random.default_rng(2024)
    batch = [random_molecule(rng, 3, energy=-4.0, ident="three"), random_molecule(rng, 5, energy=1.5, ident="five")]
    params = random_model(hyper, seed=11)
    config = LossConfig(lambda_l2=1e-2, lambda_r=0.5)
    _, grads = loss_gradients(batch, params, config)
    assert set(grads) == set(params.learnable)
    worst = 0.0
    for name in sorted(grads):
        arr = params.tensors[name]
        for k in rng.choice(arr.size, min(arr.size, 200), replace=False):
            idx = np.unravel_index(k, arr.shape)
            orig = arr[idx]
            arr[idx] = orig + 1e-4
            up = batch_loss(batch, params, config).total
            arr[idx] = orig - 1e-4
            down = batch_loss(batch, params, config).total
            arr[idx] = orig
            fd = (up - down) / 2e-4
            an = grads[name][idx]
            err = abs(an - fd) / (abs(an) + abs(fd) + 1e-8)
            worst = max(worst, err)
            assert err < 1e-6, (name, idx, an, fd)
    assert worst < 1e-6


@criterion(3, "symmetry: permutation, rigid motion, additivity, cutoff smoothness")
def test_criterion_3_symmetry():
    hyper = HyperParameters(n_feature=6, n_sensitivity=6, n_onsite=1)
    params = random_model(hyper, seed=5)
    rng = np.random.default_rng(33)
    mol = random_molecule(rng, 8, spread=4.5)
    e = forward(mol, params).total

    perm = rng.permutation(mol.n_atoms)
    assert rel(e, forward(MolecularConfiguration(mol.atomic_numbers[perm], mol.coordinates[perm]), params).total) <= 1e-10
    Q = random_rotation(rng)
    for M in (Q, Q @ np.diag([1.0, -1.0, 1.0])):
        moved = MolecularConfiguration(mol.atomic_numbers, mol.coordinates @ M.T + rng.normal(0, 10, 3))
        assert rel(e, forward(moved, params).total) <= 1e-10

    other = random_molecule(rng, 5)
    joined = MolecularConfiguration(np.concatenate([mol.atomic_numbers, other.atomic_numbers]),
                                    np.vstack([mol.coordinates, other.coordinates + [0.0, 50.0, 0.0]]))
    assert rel(forward(joined, params).total, e + forward(other, params).total) <= 1e-10

    r_cut = hyper.r_cut

    def pair_energy(r):
        return forward(MolecularConfiguration([7, 1], [[0, 0, 0], [r, 0, 0]]), params).total

    far = pair_energy(r_cut + 1)
    scale = max(1.0, abs(far))
    # the energy is continuous across the cutoff ...
    assert abs(pair_energy(r_cut - 1e-7) - far) <= 1e-6 * scale
    # ... and so is its derivative: one-sided second-order stencils at r_cut
    # agree with each other and with the central difference straddling it.
    h = 1e-4
    left = (3 * far - 4 * pair_energy(r_cut - h) + pair_energy(r_cut - 2 * h)) / (2 * h)
    right = (-3 * far + 4 * pair_energy(r_cut + h) - pair_energy(r_cut + 2 * h)) / (2 * h)
    central = (pair_energy(r_cut + 1e-5) - pair_energy(r_cut - 1e-5)) / 2e-5
    assert abs(left - right) <= 1e-6 * scale
    assert abs(central - right) <= 1e-6 * scale


@criterion(4, "initialization: sensitivity endpoints, width 68, dressed-atom fit")
def test_criterion_4_initialization():
    hyper = HyperParameters()
    rng = np.random.default_rng(4)
    coef = {1: -0.6, 6: -38.1, 7: -54.7, 8: -75.2, 9: -99.8}
    data = []
    for k in range(100):
        m = random_molecule(rng, int(rng.integers(1, 9)), ident=str(k))
        m.reference_energy = float(sum(coef[z] for z in m.atomic_numbers))
        data.append(m)
    params = init_parameters(hyper, data, seed=0)
    for l in (0, 4):
        mu = params[f"layer{l}.mu_inv"]
        assert {float(mu[0]), float(mu[-1])} == {1 / 1.7, 1 / 10}
        assert np.all(1.0 / params[f"layer{l}.sigma_inv"] == 68.0)

    noisy = [MolecularConfiguration(m.atomic_numbers, m.coordinates, m.reference_energy + float(rng.normal(0, 5)),
                                    m.identifier) for m in data]
    w, b = fit_E0(noisy, hyper.species)
    A = species_counts(noisy, hyper.species)
    E = np.array([m.reference_energy for m in noisy])
    np.testing.assert_allclose(w, np.linalg.solve(A.T @ A, A.T @ E), rtol=1e-8)

    order0 = predict(data, params).per_order_totals[:, 0]
    assert np.max(np.abs(order0 - [m.reference_energy for m in data])) < 1e-9


@criterion(5, "schedule golden trace: decays at 150 and 200, stop at 200")
def test_criterion_5_schedule_trace():
    data = make_molecules(4, seed=0, min_atoms=2, max_atoms=2)
    split = DatasetSplit(data, [], [], 0)
    hyper = HyperParameters(n_interaction=1, n_onsite=0, n_feature=2, n_sensitivity=2)
    result = train(split, hyper, OptimizerConfig(), validation_metric=lambda params, epoch: 1.0)
    assert result.decay_epochs == [150, 200]
    assert len(result.history) == 200
    assert result.stop_reason == "two decays without improvement"
    etas = [row["eta"] for row in result.history]
    assert set(etas[:150]) == {1e-3} and set(etas[150:]) == {5e-4}


@criterion(6, "overfit sanity on 50 QM9 molecules")
@pytest.mark.slow
def test_criterion_6_overfit_qm9():
    need_qm9()
    data = pruned_qm9()[:50]
    result = train(DatasetSplit(data, data, [], 0), HyperParameters(n_feature=20), OptimizerConfig(t_max=2000))
    pred = predict(data, result.params).total
    assert float(np.mean(np.abs(pred - [m.reference_energy for m in data]))) < 0.1


@criterion(6, "overfit sanity on the 50-molecule synthetic stand-in")
@pytest.mark.slow
def test_criterion_6_overfit_toy():
    data, result = overfit_run()
    pred = predict(data, result.params).total
    assert float(np.mean(np.abs(pred - [m.reference_energy for m in data]))) < 0.1


@criterion(7, "pruned QM9 has about 131k molecules and sigma_E = 238 +/- 3")
def test_criterion_7_dataset_statistics():
    need_qm9()
    if not QM9_EXCLUSIONS:
        pytest.skip("set HIPNN_QM9_EXCLUSIONS to the 3054 + 11 excluded identifiers")
    data = pruned_qm9()
    assert 130_000 <= len(data) <= 132_000
    assert abs(compute_sigma_E(data) - 238.0) <= 3.0


@criterion(8, "hierarchy behaviour after training on 10k QM9 molecules")
@pytest.mark.slow
def test_criterion_8_hierarchy():
    need_qm9()
    need_extended()
    split = split_dataset(pruned_qm9(), 10_000, 1_000, seed=0)
    test = split.test[:20_000]
    assert len(test) >= 5_000
    result = train(split, HyperParameters(n_feature=20), OptimizerConfig())
    curve = truncation_curve(result.params, test)
    assert all(b <= a for a, b in zip(curve, curve[1:])), curve
    report = evaluate(result.params, test)
    magnitudes = mean_abs_order_energies(report.per_order_totals)
    assert all(b < a for a, b in zip(magnitudes, magnitudes[1:])), magnitudes
    rho, p = rank_correlation([r.abs_error for r in report.records],
                              [r.non_hierarchicality for r in report.records])
    assert rho > 0 and p < 0.05


@criterion(9, "extended run: n_feature=5 on 50k QM9, test MAE <= 2.5")
@pytest.mark.slow
def test_criterion_9_extended_qm9():
    need_qm9()
    need_extended()
    split = split_dataset(pruned_qm9(), 50_000, 1_000, seed=0)
    result = train(split, HyperParameters(n_feature=5), OptimizerConfig())
    assert evaluate(result.params, split.test).mae <= 2.5


@criterion(9, "extended run: benzene MD, 1k training frames, MAE <= 0.35")
@pytest.mark.slow
def test_criterion_9_extended_benzene():
    if not BENZENE or not os.path.exists(BENZENE):
        pytest.skip("benzene trajectory not on disk; set HIPNN_BENZENE_XYZ")
    need_extended()
    data = read_extended_xyz(BENZENE)
    split = split_dataset(data, 1_000, 1_000, seed=0)
    hyper = HyperParameters(n_onsite=0, n_feature=20)
    assert 9_000 <= count_parameters(hyper)[0] <= 12_000
    result = train(split, hyper, OptimizerConfig())
    assert evaluate(result.params, split.test[:10_000]).mae <= 0.35


@criterion(10, "checkpoint round trip is bit-exact and reproduces best_score")
def test_criterion_10_persistence(tmp_path):
    data = make_molecules(30, seed=3, max_atoms=6)
    split = DatasetSplit(data[:20], data[20:], [], 3)
    path = tmp_path / "best.ckpt"

    def save(epoch, params, score):
        save_checkpoint(Checkpoint(params, None, {"epoch": epoch, "best_score": score}), path)

    hyper = HyperParameters(n_feature=6, n_sensitivity=5, n_onsite=1)
    result = train(split, hyper, OptimizerConfig(t_max=15, batch_size=7, eta_init=3e-3), on_improvement=save)
    loaded = load_checkpoint(path)
    for name, arr in result.params.tensors.items():
        assert loaded.params[name].tobytes() == arr.tobytes()
    pred = predict(split.validate, loaded.params).total
    score = float(np.mean(np.abs(pred - [m.reference_energy for m in split.validate])))
    recorded = loaded.history_cursor["best_score"]
    assert recorded == result.best_score
    assert abs(score - recorded) <= 1e-10 * abs(recorded)
