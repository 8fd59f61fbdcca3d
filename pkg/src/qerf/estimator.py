"""End-to-end QERF estimator: GPS matching design followed by quantile fits."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_tau
from .dataset import ObservationalDataset
from .exceptions import ValidationError
from .matching import DEFAULT_DELTA_GRID, DEFAULT_SCALE_GRID, GPSMatching
from .quantile import (
    QuantileCurve,
    adjust_bandwidth,
    kernel_quantile,
    qerf_empirical_curve,
    select_bandwidth_mean,
)


class MatchingQERF(BaseEstimator):
    """Quantile exposure-response curves from a GPS-matched design.

    The design stage (:class:`qerf.matching.GPSMatching`) never sees the
    outcome. The analysis stage fits, for each ``tau``, either the
    kernel-smoothed or the windowed empirical weighted quantile with weights
    ``K_j * unit_weight_j``.

    Parameters
    ----------
    taus : sequence of float
    kind : {"smoothed", "empirical"}
    delta, scale : float, optional
        Fix the caliper and the GPS/exposure trade-off; tuned by AAC otherwise.
    delta_grid, scale_grid : sequences used for tuning
    h_mean : float, optional
        Mean-regression bandwidth; LOO-CV on the matched units when omitted.
    h_grid : sequence, optional
    n_jobs : int, optional
        joblib parallelism for tuning.

    Attributes
    ----------
    design_ : fitted GPSMatching
    matched_ : MatchedDataset with outcome attached
    h_mean_ : float (smoothed only)
    """

    def __init__(self, taus=(0.1, 0.5, 0.9), kind="smoothed", delta=None, scale=None,
                 delta_grid=DEFAULT_DELTA_GRID, scale_grid=DEFAULT_SCALE_GRID,
                 h_mean=None, h_grid=None, n_jobs=None):
        self.taus = taus
        self.kind = kind
        self.delta = delta
        self.scale = scale
        self.delta_grid = delta_grid
        self.scale_grid = scale_grid
        self.h_mean = h_mean
        self.h_grid = h_grid
        self.n_jobs = n_jobs

    def fit(self, X, w, y, sample_weight=None):
        ds = ObservationalDataset(exposure=w, covariates=X, outcome=y, unit_weight=sample_weight)
        return self.fit_dataset(ds)

    def fit_dataset(self, ds: ObservationalDataset):
        if ds.outcome is None:
            raise ValidationError("MatchingQERF needs an outcome")
        if self.kind not in ("smoothed", "empirical"):
            raise ValidationError(f"unknown kind {self.kind!r}")
        self.taus_ = tuple(check_tau(t) for t in np.atleast_1d(self.taus))
        self.design_ = GPSMatching(
            delta=self.delta, scale=self.scale, delta_grid=self.delta_grid,
            scale_grid=self.scale_grid, n_jobs=self.n_jobs,
        ).fit_dataset(ds.without_outcome())
        self.matched_ = self.design_.matched_.with_outcome(ds.outcome)
        if self.kind == "smoothed":
            self.h_mean_ = (float(self.h_mean) if self.h_mean is not None
                            else select_bandwidth_mean(self.matched_, self.h_grid))
        return self

    @property
    def config_(self):
        return self.design_.config_

    def frozen_params(self) -> dict:
        """Parameters that reproduce this fit's design and bandwidth without re-tuning."""
        check_is_fitted(self, "matched_")
        out = {"delta": self.config_.delta, "scale": self.config_.scale}
        if self.kind == "smoothed":
            out["h_mean"] = self.h_mean_
        return out

    def predict(self, w) -> np.ndarray:
        """Estimates with shape ``(len(w), len(taus))``."""
        check_is_fitted(self, "matched_")
        return predict_matched(self.matched_, w, self.taus_, self.kind, getattr(self, "h_mean_", None))

    def curves(self, grid) -> list:
        est = self.predict(grid)
        return [QuantileCurve(t, grid, est[:, k], kind=self.kind) for k, t in enumerate(self.taus_)]

    def qee(self, w, w_prime) -> np.ndarray:
        """``q(w) - q(w')`` for every tau; ``w`` and ``w_prime`` broadcast."""
        w, w_prime = np.broadcast_arrays(np.atleast_1d(np.asarray(w, float)), np.atleast_1d(np.asarray(w_prime, float)))
        est = self.predict(np.concatenate([w, w_prime]))
        n = w.shape[0]
        return est[:n] - est[n:]


def predict_matched(matched, points, taus, kind="smoothed", h_mean=None) -> np.ndarray:
    """QERF estimates from a matched dataset with an outcome, shape ``(len(points), len(taus))``.

    Empirical estimates are NaN where the caliper window is empty.
    """
    grid = np.ravel(np.asarray(points, dtype=float))
    src = matched.source
    cols = []
    for tau in taus:
        if kind == "smoothed":
            if h_mean is None:
                raise ValidationError("smoothed estimates need h_mean")
            h = adjust_bandwidth(h_mean, tau).h_tau
            cols.append(kernel_quantile(src.exposure, src.outcome, matched.analysis_weight, grid, tau, h))
        elif kind == "empirical":
            cols.append(_empirical_points(matched, grid, tau))
        else:
            raise ValidationError(f"unknown kind {kind!r}")
    return np.column_stack(cols)


def _empirical_points(matched, points, tau):
    # empirical curve on arbitrary (possibly unsorted) points
    out = np.empty(points.shape[0])
    order = np.argsort(points, kind="stable")
    uniq, inv = np.unique(points[order], return_inverse=True)
    vals = qerf_empirical_curve(matched, uniq, tau).estimate
    out[order] = vals[inv]
    return out
