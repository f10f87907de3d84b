"""
Training with Adam and plateau annealing
========================================

A small model on synthetic molecules. Validation MAE drives the learning
rate schedule and early stopping; the best snapshot is returned.
"""
import numpy as np

from hipnn.analysis import evaluate, truncation_curve
from hipnn.dataset import split_dataset
from hipnn.model import HyperParameters
from hipnn.toydata import make_molecules
from hipnn.trainer import OptimizerConfig, train

data = make_molecules(400, seed=2)
split = split_dataset(data, n_train=300, n_validate=50, seed=0)

hyper = HyperParameters(n_feature=12, n_sensitivity=10)
opt = OptimizerConfig(t_max=150, t_init=40, t_patience=15, seed=0)


def show(row):
    if row["epoch"] % 25 == 0:
        print(f"epoch {row['epoch']:4d}  train MAE {row['train_mae']:8.3f}  "
              f"validation MAE {row['validation_mae']:8.3f}  eta {row['eta']:.2e}")


result = train(split, hyper, opt, on_epoch=show)
print("stopped:", result.stop_reason, "after", len(result.history), "epochs; decays at", result.decay_epochs)

report = evaluate(result.params, split.test)
print(f"test MAE {report.mae:.3f}  RMSE {report.rmse:.3f}  >1 kcal/mol: {report.pct_above_1kcal:.1f}%")

# truncating the hierarchy: MAE using orders 0..k only
for k, value in enumerate(truncation_curve(result.params, split.test)):
    print(f"  orders 0..{k}: MAE {value:.3f}")
print("median R on test:", float(np.median([r.non_hierarchicality for r in report.records])))
