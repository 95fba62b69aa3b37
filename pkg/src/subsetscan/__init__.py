"""Fast subset scans for anomalous clusters in correlated counts and case tensors."""

from .estimators import GaussianProcessSubsetScan, MultidimensionalTensorScan
from .exceptions import (
    CellLookupError,
    ConditioningError,
    ConfigError,
    DecompositionError,
    IngestionError,
    InvalidAggregateError,
    InvalidSubsetError,
    OptimizationError,
    ScanError,
    SubsetScanError,
)
from .gp import GPModel, PointDataset, fit_hyperparameters, log_marginal_likelihood, posterior_conditional
from .gpss import GpssConfig, build_neighborhoods, gpss_scan, scan_neighborhood_exhaustive, scan_neighborhood_iterative
from .inference import RandomizationConfig, generate_null_replica, randomization_test
from .mdts import MdtsConfig, Subspace, ltss_conditional_optimize, mdts_scan
from .replay import ReplayConfig, replay
from .scores import GaussianResidualSystem, PoissonAggregate, ebp_score, gaussian_meanshift_score
from .tensor import CaseTensor, aggregate_records, baseline_lookup, cp_decompose

__version__ = "0.1.0"

__all__ = [
    "CaseTensor",
    "CellLookupError",
    "ConditioningError",
    "ConfigError",
    "DecompositionError",
    "GPModel",
    "GaussianProcessSubsetScan",
    "GaussianResidualSystem",
    "GpssConfig",
    "IngestionError",
    "InvalidAggregateError",
    "InvalidSubsetError",
    "MdtsConfig",
    "MultidimensionalTensorScan",
    "OptimizationError",
    "PoissonAggregate",
    "PointDataset",
    "RandomizationConfig",
    "ReplayConfig",
    "ScanError",
    "SubsetScanError",
    "Subspace",
    "aggregate_records",
    "baseline_lookup",
    "build_neighborhoods",
    "cp_decompose",
    "ebp_score",
    "fit_hyperparameters",
    "gaussian_meanshift_score",
    "generate_null_replica",
    "gpss_scan",
    "log_marginal_likelihood",
    "ltss_conditional_optimize",
    "mdts_scan",
    "posterior_conditional",
    "randomization_test",
    "replay",
    "scan_neighborhood_exhaustive",
    "scan_neighborhood_iterative",
]
