"""Hierarchically interacting particle neural network (HIP-NN) in numpy."""
from .dataset import (DatasetSplit, MolecularConfiguration, SpeciesTable, apply_exclusion_list,
                      compute_sigma_E, load_qm9, parse_extended_xyz, read_extended_xyz, split_dataset)
from .geometry import NeighborList, build_neighbor_list, one_hot_encode
from .model import (EnergyDecomposition, HyperParameters, ModelParameters, count_parameters,
                    forward, predict)
from .loss import LossBreakdown, l2_penalty, mae, non_hierarchicality, rmse, total_loss
from .gradients import LossConfig, loss_gradients
from .trainer import OptimizerConfig, fit_E0, init_parameters, train
from .analysis import error_quantiles, evaluate, truncated_mae
from .persistence import Checkpoint, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
