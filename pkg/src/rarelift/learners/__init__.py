"""Base learners: boosted trees, feed-forward net, factorization machine."""

from .base import LearnerSpec, fit_learner, predict, project_features
from .fm import FmModel, FmParams, fit_fm
from .gbdt import (
    FocalParams,
    GbdtModel,
    GbdtParams,
    fit_gbdt,
    fit_subset,
    focal_grad_hess,
    focal_loss_value,
)
from .mlp import MlpModel, MlpParams, fit_mlp

__all__ = [
    "FmModel",
    "FmParams",
    "FocalParams",
    "GbdtModel",
    "GbdtParams",
    "LearnerSpec",
    "MlpModel",
    "MlpParams",
    "fit_fm",
    "fit_gbdt",
    "fit_learner",
    "fit_mlp",
    "fit_subset",
    "focal_grad_hess",
    "focal_loss_value",
    "predict",
    "project_features",
]
