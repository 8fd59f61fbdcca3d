"""Quantile exposure-response curves for a continuous exposure via GPS caliper matching."""

__version__ = "0.1.0"

from .dataset import ColumnMapping, ExposureRange, ObservationalDataset, load_csv, trim_exposure, write_csv
from .estimator import MatchingQERF
from .gps import GpsModel, LinearGPS, MarginalDensity, fit_linear_gps, fit_marginal_density
from .inference import BootstrapBands, VarianceEstimate, bootstrap_bands, qee_variance, variance_qerf
from .matching import (
    BalanceReport,
    GPSMatching,
    MatchConfig,
    MatchedDataset,
    balance_report,
    match_templates,
    tune_hyperparameters,
)
from .quantile import (
    KernelQuantileRegressor,
    QuantileCurve,
    adjust_bandwidth,
    kernel_quantile,
    qee,
    qerf_empirical,
    qerf_smooth,
    weighted_quantile,
)

__all__ = [
    "BalanceReport", "BootstrapBands", "ColumnMapping", "ExposureRange", "GPSMatching", "GpsModel",
    "KernelQuantileRegressor", "LinearGPS", "MarginalDensity", "MatchConfig", "MatchedDataset",
    "MatchingQERF", "ObservationalDataset", "QuantileCurve", "VarianceEstimate", "adjust_bandwidth",
    "balance_report", "bootstrap_bands", "fit_linear_gps", "fit_marginal_density", "kernel_quantile",
    "load_csv", "match_templates", "qee", "qee_variance", "qerf_empirical", "qerf_smooth",
    "trim_exposure", "tune_hyperparameters", "variance_qerf", "weighted_quantile", "write_csv",
]
