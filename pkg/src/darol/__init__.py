"""Regularized inverse problems and their neural-operator surrogates.

Forward models, LASSO and Bayesian conditional-mean regularizers, dataset
construction, bounded ReLU operator networks and error analysis.
"""

from .analysis import ErrorReport, empirical_errors
from .dataset import RegularizedDataset, build_explicit, build_implicit, build_regularized
from .forward_models import EllipticModel, LinearForwardMap, NoiseSpec, PriorSpec, make_linear_map
from .lasso import LassoProblem, certify, solve_lasso
from .nn import MlpOperator, TrainConfig, init_network, train
from .numerics import svd

__version__ = "0.1.0"
