"""Differentiable Monte Carlo acquisition functions for batch Bayesian optimization."""

__version__ = "0.1.0"

from .acquisitions import AcquisitionSpec, evaluate, mc_gradient, mc_value  # noqa: E402
from .gp import Dataset, GPModel, Hyperparams  # noqa: E402
from .maximizers import MaximizerConfig, SelectionResult, select  # noqa: E402
from .reparam import draw_base_samples, reparameterize  # noqa: E402

__all__ = [
    "AcquisitionSpec",
    "Dataset",
    "GPModel",
    "Hyperparams",
    "MaximizerConfig",
    "SelectionResult",
    "draw_base_samples",
    "evaluate",
    "mc_gradient",
    "mc_value",
    "reparameterize",
    "select",
]
