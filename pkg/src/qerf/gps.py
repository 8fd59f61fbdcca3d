"""Generalized propensity score (linear-Gaussian) and marginal exposure density."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import norm
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_covariates_exposure, check_weights
from .exceptions import (
    DegenerateResidual,
    DegenerateSample,
    DimensionMismatch,
    RankDeficientDesign,
    ValidationError,
)

SQRT_2PI = np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class GpsModel:
    """Normal conditional density of the exposure given covariates.

    ``e(w, c) = phi((w - intercept - c @ coefficients) / residual_sd) / residual_sd``
    """

    intercept: float
    coefficients: tuple
    residual_sd: float

    def __post_init__(self):
        object.__setattr__(self, "coefficients", tuple(float(b) for b in self.coefficients))
        if not self.residual_sd > 0:
            raise ValidationError(f"residual_sd must be positive, got {self.residual_sd}")

    @property
    def n_covariates(self) -> int:
        return len(self.coefficients)

    def mean(self, covariates) -> np.ndarray:
        c = np.asarray(covariates, dtype=float)
        if c.ndim == 1:
            c = c.reshape(1, -1) if self.n_covariates else c.reshape(-1, 0)
        if c.shape[-1] != self.n_covariates:
            raise DimensionMismatch(f"model has {self.n_covariates} coefficients, covariates have {c.shape[-1]} columns")
        return self.intercept + c @ np.asarray(self.coefficients)

    def density(self, exposure, covariates) -> np.ndarray:
        """GPS at each (exposure, covariate row) pair; ``exposure`` broadcasts."""
        mu = self.mean(covariates)
        return norm.pdf(np.asarray(exposure, dtype=float), loc=mu, scale=self.residual_sd)

    def log_density(self, exposure, covariates) -> np.ndarray:
        """Log GPS; finite where :meth:`density` underflows to zero."""
        mu = self.mean(covariates)
        return norm.logpdf(np.asarray(exposure, dtype=float), loc=mu, scale=self.residual_sd)

    def to_dict(self) -> dict:
        return {
            "family": "linear-gaussian",
            "intercept": self.intercept,
            "coefficients": list(self.coefficients),
            "residual_sd": self.residual_sd,
        }

    @classmethod
    def from_dict(cls, d) -> "GpsModel":
        return cls(float(d["intercept"]), tuple(d["coefficients"]), float(d["residual_sd"]))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "GpsModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


class LinearGPS(BaseEstimator):
    """Weighted least-squares GPS with Normal errors (ML scale estimate).

    Parameters
    ----------
    rtol : float
        Relative tolerance for declaring the design rank deficient and the
        residual spread degenerate.

    Attributes
    ----------
    intercept_, coef_, residual_sd_ : fitted parameters
    model_ : GpsModel
    """

    def __init__(self, rtol=1e-10):
        self.rtol = rtol

    def fit(self, X, w, sample_weight=None):
        X, w = check_covariates_exposure(X, w)
        n, q = X.shape
        u = check_weights(sample_weight, n)
        if n <= q + 1:
            raise RankDeficientDesign(f"{n} units cannot identify {q + 1} regression parameters and a scale")
        design = np.column_stack([np.ones(n), X])
        root = np.sqrt(u)
        A = design * root[:, None]
        beta, _, rank, sv = np.linalg.lstsq(A, w * root, rcond=None)
        if rank < q + 1 or sv[-1] <= self.rtol * sv[0]:
            raise RankDeficientDesign("covariate design matrix (with intercept) is not of full column rank")
        resid = w - design @ beta
        sd = float(np.sqrt(np.sum(u * resid**2) / np.sum(u)))
        scale = max(float(np.max(np.abs(w))), 1.0)
        if sd <= self.rtol * scale:
            raise DegenerateResidual("exposure is fitted exactly by the covariates; GPS would violate overlap")
        self.intercept_ = float(beta[0])
        self.coef_ = beta[1:].copy()
        self.residual_sd_ = sd
        self.model_ = GpsModel(self.intercept_, tuple(self.coef_), sd)
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.model_.mean(X)

    def density(self, X, w):
        check_is_fitted(self, "model_")
        return self.model_.density(w, X)


def fit_linear_gps(ds) -> GpsModel:
    return LinearGPS().fit(ds.covariates, ds.exposure, ds.unit_weight).model_


def evaluate_gps(model: GpsModel, w, c) -> float:
    c = np.asarray(c, dtype=float).ravel()
    if c.shape[0] != model.n_covariates:
        raise DimensionMismatch(f"expected {model.n_covariates} covariates, got {c.shape[0]}")
    return float(model.density(w, c.reshape(1, -1))[0])


def effective_sample_size(weights) -> float:
    w = np.asarray(weights, dtype=float)
    return float(w.sum() ** 2 / np.sum(w**2))


def silverman_bandwidth(x, weights=None) -> float:
    """``0.9 * min(sd, IQR / 1.34) * n ** (-1/5)`` with optional weights.

    Weighted moments and quantiles are used when weights are given and ``n``
    becomes the Kish effective sample size. A zero IQR with positive spread
    falls back to the standard deviation.
    """
    from .quantile import weighted_quantile

    x = np.asarray(x, dtype=float).ravel()
    if x.size == 0:
        raise DegenerateSample("empty sample")
    w = np.ones_like(x) if weights is None else np.asarray(weights, dtype=float).ravel()
    keep = w > 0
    x, w = x[keep], w[keep]
    if x.size < 2:
        raise DegenerateSample("need at least two points with positive weight")
    mean = np.average(x, weights=w)
    sd = float(np.sqrt(np.average((x - mean) ** 2, weights=w)))
    if weights is None:
        sd *= np.sqrt(x.size / (x.size - 1.0))
    if not sd > 0:
        raise DegenerateSample("sample has no spread")
    iqr = weighted_quantile(x, w, 0.75) - weighted_quantile(x, w, 0.25)
    spread = min(sd, iqr / 1.34) if iqr > 0 else sd
    return 0.9 * spread * effective_sample_size(w) ** (-0.2)


def gaussian_kde(points, sample, weights, bandwidth, chunk=2_000_000) -> np.ndarray:
    """Weighted Gaussian kernel density estimate evaluated at ``points``.

    ``weights`` are normalized to sum to one.
    """
    points = np.atleast_1d(np.asarray(points, dtype=float))
    sample = np.asarray(sample, dtype=float)
    p = np.asarray(weights, dtype=float) / np.sum(weights)
    out = np.empty(points.shape[0])
    step = max(1, chunk // max(sample.shape[0], 1))
    for start in range(0, points.shape[0], step):
        z = (points[start:start + step, None] - sample[None, :]) / bandwidth
        out[start:start + step] = np.exp(-0.5 * z * z) @ p
    return out / (bandwidth * SQRT_2PI)


@dataclass(frozen=True, eq=False)
class MarginalDensity:
    sample: np.ndarray
    bandwidth: float
    weights: np.ndarray = None

    def __post_init__(self):
        sample = np.asarray(self.sample, dtype=float)
        if sample.size == 0:
            raise DegenerateSample("empty sample")
        if not self.bandwidth > 0:
            raise ValidationError("bandwidth must be positive")
        w = np.ones_like(sample) if self.weights is None else np.asarray(self.weights, dtype=float)
        object.__setattr__(self, "sample", sample)
        object.__setattr__(self, "weights", w)

    def __call__(self, w) -> np.ndarray:
        return gaussian_kde(w, self.sample, self.weights, self.bandwidth)


def fit_marginal_density(ds) -> MarginalDensity:
    """Gaussian KDE of the exposure with Silverman's rule of thumb."""
    h = silverman_bandwidth(ds.exposure, None if np.all(ds.unit_weight == 1.0) else ds.unit_weight)
    return MarginalDensity(ds.exposure, h, ds.unit_weight)


def evaluate_marginal(md: MarginalDensity, w):
    out = md(w)
    return float(out[0]) if np.ndim(w) == 0 else out
