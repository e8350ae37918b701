"""Ordinal multi-aspect rating model with user-group aspect biases, fitted by Gibbs sampling."""

__version__ = "0.1.0"

from .domain import Hyperparameters, RatingsDataset, RunConfig, validate_dataset
from .engine import FULL_MODEL, ModelKind, PosteriorSamples, fit, predict, predict_many

__all__ = [
    "FULL_MODEL",
    "Hyperparameters",
    "ModelKind",
    "PosteriorSamples",
    "RatingsDataset",
    "RunConfig",
    "fit",
    "predict",
    "predict_many",
    "validate_dataset",
]
