"""
Non-hierarchicality as an error indicator
=========================================

Error quantiles per log10(R) bin and the rank correlation between R and
the absolute error.
"""
import numpy as np

from hipnn.analysis import error_quantiles, evaluate, rank_correlation
from hipnn.dataset import split_dataset
from hipnn.model import HyperParameters
from hipnn.toydata import make_molecules
from hipnn.trainer import OptimizerConfig, train

data = make_molecules(600, seed=5)
split = split_dataset(data, n_train=250, n_validate=50, seed=1)
result = train(split, HyperParameters(n_feature=10, n_sensitivity=8),
               OptimizerConfig(t_max=80, t_init=30, t_patience=10))
report = evaluate(result.params, split.test)

err = np.array([r.abs_error for r in report.records])
R = np.array([r.non_hierarchicality for r in report.records])
table = error_quantiles(err, R, [0.5, 0.9], bin_width_log10=0.25)
print(table.convention)
for lo, hi, count, (q50, q90) in table.rows():
    if count:
        print(f"log10 R in [{lo:6.2f}, {hi:6.2f})  n={count:4d}  median {q50:7.3f}  90% {q90:7.3f}")

rho, p = rank_correlation(err, R)
print(f"Spearman rho = {rho:.3f} (p = {p:.2g}) on {len(err)} test molecules")
