"""Proximity variational inference: constrained ELBO optimization with reference models."""

from .data import binarize, binary_mnist, downsample, load_idx_images, load_idx_labels
from .evaluation import is_marginal_likelihood, log_mean_exp, validation_elbo
from .exceptions import ConfigurationError, DivergenceError, IDXFormatError
from .factor import BernoulliFactorVI, FactorModel
from .harness import ExperimentConfig, run, sweep_report
from .optim import run_optimizer
from .params import Layout, ParamVector
from .proximity import ProximityConfig, Schedule
from .records import RunRecord
from .sbn import SigmoidBeliefNet
from .vae import VariationalAutoencoder

__all__ = [
    "BernoulliFactorVI",
    "ConfigurationError",
    "DivergenceError",
    "ExperimentConfig",
    "FactorModel",
    "IDXFormatError",
    "Layout",
    "ParamVector",
    "ProximityConfig",
    "RunRecord",
    "Schedule",
    "SigmoidBeliefNet",
    "VariationalAutoencoder",
    "binarize",
    "binary_mnist",
    "downsample",
    "is_marginal_likelihood",
    "load_idx_images",
    "load_idx_labels",
    "log_mean_exp",
    "run",
    "run_optimizer",
    "sweep_report",
    "validation_elbo",
]
