"""Normalizing flows with Gaussian, Laplace or multivariate Student-t base distributions.

Everything runs on NumPy: flow layers carry hand-written backward passes,
training uses Adam with optional gradient clipping, and the robust-statistics
helpers expose the penalty and influence functions of each base family.
"""
from .base import BaseDistribution, make_base
from .checkpoint import load_model, save_model
from .data import (
    Dataset,
    ForeignDataset,
    ShiftedCluster,
    UniformBox,
    dequantize,
    gen_rings,
    gen_two_moons,
    inject_outliers,
    load_idx,
    split_dataset,
)
from .flow import FlowModel, build_flow, model_backward, model_log_likelihood, model_sample
from .robust import influence, influence_bound, penalty
from .special import log_gamma, make_rng, sample_chi_square, sample_gamma
from .trainer import Clip, Constant, Cosine, Noam, TrainConfig, train

__version__ = "0.1.0"
