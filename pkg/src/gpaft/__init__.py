"""Gaussian process accelerated failure time models fitted by Monte Carlo EM."""

from .data import Censor, SurvivalDataset
from .kernels import KernelStack, normalized_rbf, pathway_stack
from .mcem import FitResult, McemConfig, fit
from .mstep import ModelParams
from .predict import Prediction, predict_log_time

__version__ = "0.1.0"

__all__ = [
    "Censor", "SurvivalDataset", "KernelStack", "normalized_rbf", "pathway_stack",
    "FitResult", "McemConfig", "fit", "ModelParams", "Prediction", "predict_log_time",
]
