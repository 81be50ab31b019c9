"""Lipschitz-bounded neural controlled differential equations for
individualized treatment-effect estimation on irregular longitudinal data,
with a seeded confounded-data generator, ablation variants, and benchmark
metrics.
"""

__version__ = "0.1.0"

from .cde import CdeConfig, ControlPath, LipschitzRnnField, cde_solve, construct_hidden_matrix
from .metrics import MetricsReport, covsim
from .model import ModelConfig, TreatmentEffectModel, VARIANTS, collate
from .outcome import PropensityNetwork, OutcomeDecoder, weighted_mse
from .sim import (
    SimConfig,
    TrajectoryRecord,
    apply_missingness,
    simulate_counterfactual,
    simulate_factual,
)
from .spectral import BoundaryBranch, FilterSpec, gaussian_filter_response, spectral_norm_project
from .training import (
    TrainConfig,
    evaluate_counterfactual,
    evaluate_rmse,
    run_experiment,
    train,
)

__all__ = [
    "BoundaryBranch",
    "CdeConfig",
    "ControlPath",
    "FilterSpec",
    "LipschitzRnnField",
    "MetricsReport",
    "ModelConfig",
    "OutcomeDecoder",
    "PropensityNetwork",
    "SimConfig",
    "TrainConfig",
    "TrajectoryRecord",
    "TreatmentEffectModel",
    "VARIANTS",
    "apply_missingness",
    "cde_solve",
    "collate",
    "construct_hidden_matrix",
    "covsim",
    "evaluate_counterfactual",
    "evaluate_rmse",
    "gaussian_filter_response",
    "run_experiment",
    "simulate_counterfactual",
    "simulate_factual",
    "spectral_norm_project",
    "train",
    "weighted_mse",
    "__version__",
]
