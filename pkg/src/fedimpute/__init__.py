"""Federated pre-processing for incomplete tabular data.

Library + CLI covering: federated standardization under missingness, a
federated deep latent variable imputer with pluggable aggregators
(FedAvg / FedProx / Scaffold), MCAR/MAR/MNAR mask simulation, mean and
chained-equation baselines, and normalized-MSE evaluation with
multiple-imputation uncertainty.
"""

__version__ = "0.1.0"

from .data import MaskedMatrix
from .errors import FedimputeError
from .fedstd import GlobalScaler, MomentSummary, aggregate_moments, apply_scaler, local_moments
from .miwae import MiwaeConfig, MiwaeModel, impute_dataset, impute_multiple, impute_single, miwae_bound
from .missingness import MaskSpec, generate_mask, mar_mask, mcar_mask, mnar_mask
from .federation import AggregatorKind, ClientState, RoundPlan, Transcript, aggregate, run_training
from .evaluation import mi_uncertainty, normalized_mse
from .datasets import SyntheticSpec, gen_synthetic, load_csv, save_csv
from .experiment import ExperimentConfig, ImputationReport, run_experiment

__all__ = [
    "__version__",
    "MaskedMatrix",
    "FedimputeError",
    "GlobalScaler",
    "MomentSummary",
    "aggregate_moments",
    "apply_scaler",
    "local_moments",
    "MiwaeConfig",
    "MiwaeModel",
    "miwae_bound",
    "impute_single",
    "impute_multiple",
    "impute_dataset",
    "MaskSpec",
    "generate_mask",
    "mcar_mask",
    "mar_mask",
    "mnar_mask",
    "AggregatorKind",
    "RoundPlan",
    "ClientState",
    "Transcript",
    "aggregate",
    "run_training",
    "normalized_mse",
    "mi_uncertainty",
    "SyntheticSpec",
    "gen_synthetic",
    "load_csv",
    "save_csv",
    "ExperimentConfig",
    "ImputationReport",
    "run_experiment",
]
