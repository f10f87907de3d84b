"""Test-set statistics, truncated hierarchies, and error quantiles binned by R."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats

from .dataset import MolecularConfiguration, reference_energies
from .model import ModelParameters, predict

QUANTILE_CONVENTION = "nearest-rank: Q(p) = x_(ceil(p*n)) of the sorted bin, no interpolation"


@dataclass
class MoleculeRecord:
    identifier: str
    predicted: float
    reference: float
    abs_error: float
    non_hierarchicality: float


@dataclass
class EvaluationReport:
    mae: float
    rmse: float
    pct_above_1kcal: float
    n_molecules: int
    records: list[MoleculeRecord]
    per_order_totals: np.ndarray

    @classmethod
    def from_records(cls, records: Sequence[MoleculeRecord], per_order_totals=None) -> "EvaluationReport":
        err = np.array([r.abs_error for r in records])
        return cls(
            mae=float(err.mean()),
            rmse=float(np.sqrt(np.mean(err ** 2))),
            pct_above_1kcal=float(100.0 * np.mean(err > 1.0)),
            n_molecules=len(records),
            records=list(records),
            per_order_totals=per_order_totals if per_order_totals is not None else np.zeros((len(records), 0)),
        )


def evaluate(params: ModelParameters, dataset: Sequence[MolecularConfiguration]) -> EvaluationReport:
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    ref = reference_energies(dataset)
    pred = predict(dataset, params)
    records = [
        MoleculeRecord(c.identifier, float(p), float(e), float(abs(p - e)), float(R))
        for c, p, e, R in zip(dataset, pred.total, ref, pred.non_hierarchicality)
    ]
    return EvaluationReport.from_records(records, pred.per_order_totals)


def truncated_mae(params: ModelParameters, dataset: Sequence[MolecularConfiguration], k: int,
                  per_order_totals: np.ndarray | None = None) -> float:
    """MAE of the energy summed over orders 0..k only."""
    if not 0 <= k <= params.hyper.n_interaction:
        raise ValueError(f"order {k} outside 0..{params.hyper.n_interaction}")
    if per_order_totals is None:
        per_order_totals = predict(dataset, params).per_order_totals
    truncated = per_order_totals[:, :k + 1].sum(axis=1)
    return float(np.mean(np.abs(truncated - reference_energies(dataset))))


def truncation_curve(params: ModelParameters, dataset) -> list[float]:
    totals = predict(dataset, params).per_order_totals
    return [truncated_mae(params, dataset, k, totals) for k in range(params.hyper.n_interaction + 1)]


def nearest_rank_quantile(sorted_values: np.ndarray, p: float) -> float:
    n = len(sorted_values)
    rank = min(n, max(1, math.ceil(p * n - 1e-12)))
    return float(sorted_values[rank - 1])


@dataclass
class QuantileTable:
    """Error quantiles per log10(R) bin.

    Bin b covers ``[edges[b], edges[b+1])`` in log10 R. ``quantiles[b][p]`` is
    None for empty bins. Records with R = 0 are only counted in `n_zero_R`.
    """

    probabilities: list[float]
    edges: np.ndarray
    counts: np.ndarray
    quantiles: list[dict[float, float | None]]
    n_zero_R: int
    convention: str = QUANTILE_CONVENTION

    def rows(self):
        for b in range(len(self.counts)):
            yield (self.edges[b], self.edges[b + 1], int(self.counts[b]),
                   [self.quantiles[b][p] for p in self.probabilities])


def error_quantiles(abs_errors, R, probabilities: Sequence[float], bin_width_log10: float = 0.066) -> QuantileTable:
    abs_errors = np.asarray(abs_errors, dtype=np.float64)
    R = np.asarray(R, dtype=np.float64)
    if len(abs_errors) == 0 or len(abs_errors) != len(R):
        raise ValueError("need equally many, and at least one, error and R values")
    for p in probabilities:
        if not 0 < p < 1:
            raise ValueError(f"probability {p} outside (0, 1)")
    positive = R > 0
    n_zero = int(np.sum(~positive))
    logR = np.log10(R[positive])
    err = abs_errors[positive]
    if len(logR) == 0:
        return QuantileTable(list(probabilities), np.zeros(1), np.zeros(0, int), [], n_zero)
    index = np.floor(logR / bin_width_log10).astype(np.int64)
    lo, hi = int(index.min()), int(index.max())
    edges = np.arange(lo, hi + 2) * bin_width_log10
    counts = np.zeros(hi - lo + 1, dtype=np.int64)
    quantiles = []
    for b in range(lo, hi + 1):
        in_bin = np.sort(err[index == b])
        counts[b - lo] = len(in_bin)
        quantiles.append({p: (nearest_rank_quantile(in_bin, p) if len(in_bin) else None)
                          for p in probabilities})
    return QuantileTable(list(probabilities), edges, counts, quantiles, n_zero)


def rank_correlation(abs_errors, R) -> tuple[float, float]:
    """Spearman rho and two-sided p-value between R and |error|."""
    res = stats.spearmanr(R, abs_errors)
    return float(res.statistic), float(res.pvalue)


def mean_abs_order_energies(per_order_totals: np.ndarray) -> np.ndarray:
    return np.abs(per_order_totals).mean(axis=0)


def write_report_csv(path, report: EvaluationReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n_molecules", "mae", "rmse", "pct_above_1kcal"])
        w.writerow([report.n_molecules, repr(report.mae), repr(report.rmse), repr(report.pct_above_1kcal)])


def write_records_csv(path, report: EvaluationReport) -> None:
    n_orders = report.per_order_totals.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["identifier", "predicted", "reference", "abs_error", "R"]
                   + [f"order{n}" for n in range(n_orders)])
        for k, r in enumerate(report.records):
            orders = [repr(float(v)) for v in report.per_order_totals[k]] if n_orders else []
            w.writerow([r.identifier, repr(r.predicted), repr(r.reference), repr(r.abs_error),
                        repr(r.non_hierarchicality)] + orders)


def read_records_csv(path) -> list[MoleculeRecord]:
    with open(path, newline="") as fh:
        return [MoleculeRecord(row["identifier"], float(row["predicted"]), float(row["reference"]),
                               float(row["abs_error"]), float(row["R"]))
                for row in csv.DictReader(fh)]


def write_quantiles_csv(path, table: QuantileTable) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# quantile convention: {table.convention}\n")
        fh.write(f"# records with R = 0 (not binned): {table.n_zero_R}\n")
        w = csv.writer(fh)
        w.writerow(["log10R_low", "log10R_high", "count"] + [f"Q_{p:g}" for p in table.probabilities])
        for lo, hi, count, qs in table.rows():
            w.writerow([repr(float(lo)), repr(float(hi)), count] + ["" if q is None else repr(q) for q in qs])


def write_truncation_csv(path, curve: Sequence[float]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "truncated_mae"])
        for k, v in enumerate(curve):
            w.writerow([k, repr(float(v))])
