"""Continuous-time crowd-flow forecasting with dual control paths.

The model drives two neural controlled differential equations, one over a
daily crowd-flow path and one over a monthly point-of-interest path, and
corrects the second during integration with counterfactual causal-effect
weights estimated by a frozen surrogate predictor.
"""

from .causal import (CausalEstimator, PerturbationStrategy, SurrogatePredictor,
                     pretrain_surrogate)
from .data import DatasetBundle, SynthConfig, load, normalize, save_dataset, \
    synth_generate, window
from .dynamics import EncoderConfig, encode, encode_plain, init_encoder_params
from .metrics import horizon_report, metrics
from .model import LossConfig, huber
from .solvers import SolverConfig, Trajectory, integrate, odeint
from .spline import SplinePath, fit_natural_cubic
from .tensor import Tensor, enable_grad, no_grad
from .training import ModelParams, TrainConfig, evaluate, init_model, train

__version__ = "0.1.0"

__all__ = [
    "CausalEstimator",
    "DatasetBundle",
    "EncoderConfig",
    "LossConfig",
    "ModelParams",
    "PerturbationStrategy",
    "SolverConfig",
    "SplinePath",
    "SurrogatePredictor",
    "SynthConfig",
    "Tensor",
    "TrainConfig",
    "Trajectory",
    "enable_grad",
    "encode",
    "encode_plain",
    "evaluate",
    "fit_natural_cubic",
    "horizon_report",
    "huber",
    "init_encoder_params",
    "init_model",
    "integrate",
    "load",
    "metrics",
    "no_grad",
    "normalize",
    "odeint",
    "pretrain_surrogate",
    "save_dataset",
    "synth_generate",
    "train",
    "window",
    "__version__",
]
