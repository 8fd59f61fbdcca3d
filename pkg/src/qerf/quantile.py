"""Outcome stage: weighted and kernel-weighted quantile fits of the QERF."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.stats import norm
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_tau, check_vector, check_weights
from .dataset import format_number
from .exceptions import (
    AllCandidatesDegenerate,
    EmptyWindow,
    ValidationError,
    ZeroTotalWeight,
)

# cumulative weight within this relative distance of the target counts as reaching it
_CUM_RTOL = 1e-12


def check_loss(u, tau):
    """Quantile loss ``u * (tau - 1(u < 0))``."""
    u = np.asarray(u, dtype=float)
    return u * (tau - (u < 0))


def weighted_quantile(values, weights, tau) -> float:
    """Smallest minimiser of ``sum_j w_j * check_loss(v_j - q, tau)``.

    Equivalently the smallest sorted value whose cumulative weight reaches
    ``tau * sum(w)``.
    """
    tau = check_tau(tau)
    v = np.asarray(values, dtype=float).ravel()
    w = np.asarray(weights, dtype=float).ravel()
    if v.shape != w.shape or v.size == 0:
        raise ValidationError("values and weights must be non-empty and of equal length")
    if np.any(w < 0):
        raise ValidationError("weights must be non-negative")
    total = w.sum()
    if not total > 0:
        raise ZeroTotalWeight("weights sum to zero")
    order = np.argsort(v, kind="stable")
    cum = np.cumsum(w[order])
    k = np.searchsorted(cum, (tau - _CUM_RTOL) * total, side="left")
    return float(v[order][min(k, v.size - 1)])


def _row_quantiles(y_sorted, W, tau):
    """Weighted tau-quantile of ``y_sorted`` under each row of weights ``W``."""
    cum = np.cumsum(W, axis=1)
    total = cum[:, -1]
    if np.any(~(total > 0)):
        raise ZeroTotalWeight("kernel weights vanish at some evaluation point")
    target = (tau - _CUM_RTOL) * total
    k = np.argmax(cum >= target[:, None], axis=1)
    return y_sorted[k]


def _log_weights(weight, log_weight, n):
    """Log analysis weights with zero weights removed; returns (keep mask, log weights)."""
    if log_weight is not None:
        lw = np.asarray(log_weight, dtype=float)
        if lw.shape != (n,) or np.any(np.isnan(lw)) or np.any(lw == np.inf):
            raise ValidationError("log weights must be a finite-or-minus-infinity vector of the data length")
    else:
        w = np.asarray(weight, dtype=float)
        if w.shape != (n,) or np.any(~(w >= 0)) or np.any(~np.isfinite(w)):
            raise ValidationError("weights must be finite, non-negative and of the data length")
        with np.errstate(divide="ignore"):
            lw = np.log(w)
    keep = lw > -np.inf
    if not keep.any():
        raise ZeroTotalWeight("all analysis weights are zero")
    return keep, lw[keep]


def kernel_quantile(x, y, weight, grid, tau, h, chunk=4_000_000, log_weight=None) -> np.ndarray:
    """Local-constant kernel quantile fit.

    At each grid point ``g`` returns the weighted tau-quantile of ``y`` with
    weights ``weight * phi((x - g) / h)``. The product is formed in log space
    and rescaled per grid point, so neither distant points nor extreme
    weights over- or underflow. ``log_weight`` replaces ``weight`` when the
    weights themselves are only representable as logarithms.
    """
    tau = check_tau(tau)
    if not h > 0:
        raise ValidationError(f"bandwidth must be positive, got {h}")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    keep, lw = _log_weights(weight, log_weight, x.shape[0])
    x, y = x[keep], y[keep]
    order = np.argsort(y, kind="stable")
    x, y, lw = x[order], y[order], lw[order]
    grid = np.atleast_1d(np.asarray(grid, dtype=float))
    out = np.empty(grid.shape[0])
    step = max(1, chunk // x.shape[0])
    for s in range(0, grid.shape[0], step):
        logk = lw - 0.5 * ((x[None, :] - grid[s:s + step, None]) / h) ** 2
        logk -= logk.max(axis=1, keepdims=True)
        out[s:s + step] = _row_quantiles(y, np.exp(logk), tau)
    return out


# -- bandwidth ----------------------------------------------------------------


def yu_jones_factor(tau) -> float:
    tau = check_tau(tau)
    return float((tau * (1.0 - tau) / norm.pdf(norm.ppf(tau)) ** 2) ** 0.2)


@dataclass(frozen=True)
class BandwidthSpec:
    h_mean: float
    h_tau: float
    tau: float


def adjust_bandwidth(h_mean, tau) -> BandwidthSpec:
    """Rescale a mean-regression bandwidth for quantile level ``tau`` (Yu and Jones)."""
    if not h_mean > 0:
        raise ValidationError(f"h_mean must be positive, got {h_mean}")
    tau = check_tau(tau)
    return BandwidthSpec(float(h_mean), float(h_mean) * yu_jones_factor(tau), tau)


def central_interval(x, mass=0.9) -> tuple:
    """Bounds of the central ``mass`` of ``x`` (smallest-minimiser quantiles)."""
    x = np.asarray(x, dtype=float)
    lo, hi = np.quantile(x, [(1.0 - mass) / 2.0, (1.0 + mass) / 2.0], method="inverted_cdf")
    return float(lo), float(hi)


def central_width(x, mass=0.9) -> float:
    """Width of the central ``mass`` of ``x``, or its range if that is zero.

    Under heavy-tailed exposures the full range is set by a handful of
    extreme units and is a poor scale for bandwidth candidates.
    """
    lo, hi = central_interval(x, mass)
    return hi - lo if hi > lo else float(np.ptp(x))


def default_bandwidth_grid(width, n=20) -> np.ndarray:
    """``n`` log-spaced candidates between ``width / 100`` and ``width``."""
    if not width > 0:
        raise ValidationError("exposure range has zero width")
    return np.geomspace(width / 100.0, width, n)


def loo_cv_scores(x, y, weight, h_grid, chunk=2_000_000, log_weight=None, region=None) -> np.ndarray:
    """Weighted leave-one-unit-out squared error of Nadaraya-Watson fits.

    Unit ``i`` is predicted from all other units with weights
    ``weight_j * phi((x_j - x_i) / h)``; its squared error counts with weight
    ``weight_i``. Returns ``inf`` for a candidate where some scored unit has
    no other unit to learn from. ``log_weight`` replaces ``weight`` as in
    :func:`kernel_quantile`. With ``region = (lo, hi)`` only units whose
    ``x`` lies in ``[lo, hi]`` are scored; every unit still enters the fits.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    keep, lw = _log_weights(weight, log_weight, x.shape[0])
    x, y = x[keep], y[keep]
    n = x.shape[0]
    scored = np.arange(n)
    if region is not None:
        scored = np.flatnonzero((x >= region[0]) & (x <= region[1]))
        if scored.size == 0:
            raise ValidationError("no unit inside the cross-validation region")
    score_w = np.exp(lw[scored] - lw[scored].max())
    h_grid = np.asarray(h_grid, dtype=float)
    sse = np.zeros(h_grid.shape[0])
    ok = np.ones(h_grid.shape[0], dtype=bool)
    step = max(1, chunk // max(n, 1))
    for s in range(0, scored.size, step):
        rows = scored[s:s + step]
        d2 = 0.5 * (x[rows, None] - x[None, :]) ** 2
        d2[np.arange(rows.size), rows] = np.inf
        for k, h in enumerate(h_grid):
            if not ok[k]:
                continue
            logk = lw - d2 / (h * h)
            top = logk.max(axis=1, keepdims=True)
            if not np.all(np.isfinite(top)):
                ok[k] = False
                continue
            K = np.exp(logk - top)
            pred = (K @ y) / K.sum(axis=1)
            sse[k] += score_w[s:s + step] @ (y[rows] - pred) ** 2
    scores = sse / score_w.sum()
    scores[~ok] = np.inf
    return scores


def select_bandwidth(x, y, weight, h_grid=None, log_weight=None, region="central") -> float:
    """Grid minimiser of :func:`loo_cv_scores`; ties go to the smaller bandwidth.

    ``region`` bounds the units whose prediction error is scored. The
    default ``"central"`` scores the central 90% of the positive-weight
    exposures, so a few isolated tail units carrying large weights cannot
    dictate the bandwidth for the whole curve. Pass ``(lo, hi)`` for explicit
    bounds or ``None`` to score every unit.
    """
    x = np.asarray(x, dtype=float)
    keep, _ = _log_weights(weight, log_weight, x.shape[0])
    if np.count_nonzero(keep) < 3:
        raise ValidationError("bandwidth selection needs at least 3 units with positive weight")
    if h_grid is None:
        h_grid = default_bandwidth_grid(central_width(x[keep]))
    h_grid = np.sort(np.asarray(h_grid, dtype=float))
    if h_grid.size == 0 or np.any(h_grid <= 0):
        raise ValidationError("bandwidth grid must be non-empty and positive")
    if isinstance(region, str):
        if region != "central":
            raise ValidationError(f"unknown region {region!r}")
        region = central_interval(x[keep])
    scores = loo_cv_scores(x, y, weight, h_grid, log_weight=log_weight, region=region)
    if not np.isfinite(scores).any():
        raise AllCandidatesDegenerate("every bandwidth candidate leaves some unit without neighbours")
    return float(h_grid[int(np.argmin(scores))])


def select_bandwidth_mean(matched, h_grid=None) -> float:
    """LOO-CV mean-regression bandwidth on the matched units (weights ``K_j * unit_weight``).

    Candidates scale with, and scoring is limited to, the central 90% of the
    observed exposures.
    """
    ds = matched.source
    _require_outcome(ds)
    if h_grid is None:
        h_grid = default_bandwidth_grid(central_width(ds.exposure))
    return select_bandwidth(ds.exposure, ds.outcome, matched.analysis_weight, h_grid,
                            region=central_interval(ds.exposure))


# -- curves -------------------------------------------------------------------


@dataclass(eq=False)
class QuantileCurve:
    tau: float
    grid: np.ndarray
    estimate: np.ndarray
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    kind: str = "smoothed"

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        self.estimate = np.asarray(self.estimate, dtype=float)
        if self.grid.ndim != 1 or self.grid.shape != self.estimate.shape:
            raise ValidationError("grid and estimate must be 1-d of equal length")
        if np.any(np.diff(self.grid) <= 0):
            raise ValidationError("grid must be strictly increasing")

    def at(self, w) -> float:
        """Estimate at a grid point (exact match required)."""
        hit = np.flatnonzero(np.isclose(self.grid, w, rtol=0, atol=1e-12 * max(1.0, abs(w))))
        if hit.size == 0:
            raise ValidationError(f"{w} is not a grid point of this curve")
        return float(self.estimate[hit[0]])


def write_curves_csv(curves, path, label="w"):
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["tau", label, "estimate", "lower", "upper"])
        for c in curves:
            for i, g in enumerate(c.grid):
                writer.writerow([
                    format_number(c.tau), format_number(g), format_number(c.estimate[i]),
                    "" if c.lower is None else format_number(c.lower[i]),
                    "" if c.upper is None else format_number(c.upper[i]),
                ])


def _require_outcome(ds):
    if ds.outcome is None:
        raise ValidationError("the matched dataset carries no outcome; attach one before the analysis stage")


def qerf_empirical(matched, w, tau) -> float:
    """Weighted quantile of outcomes of matched units with exposure in ``[w - delta, w + delta]``."""
    ds = matched.source
    _require_outcome(ds)
    weight = matched.analysis_weight * matched.in_window(w)
    if not weight.sum() > 0:
        raise EmptyWindow(f"no matched unit with exposure within {matched.delta} of {w}")
    return weighted_quantile(ds.outcome, weight, tau)


def _as_bandwidth(matched, h, tau):
    if h is None:
        h = select_bandwidth_mean(matched)
    if isinstance(h, BandwidthSpec):
        if abs(h.tau - tau) > 1e-12:
            raise ValidationError(f"bandwidth was adjusted for tau={h.tau}, not {tau}")
        return h
    return adjust_bandwidth(h, tau)


def qerf_smooth(matched, grid, tau, h=None) -> QuantileCurve:
    """Kernel-weighted quantile fit over all matched units.

    ``h`` is a :class:`BandwidthSpec`, a mean-regression bandwidth to be
    adjusted for ``tau``, or ``None`` to select one by LOO-CV.
    """
    ds = matched.source
    _require_outcome(ds)
    tau = check_tau(tau)
    spec = _as_bandwidth(matched, h, tau)
    est = kernel_quantile(ds.exposure, ds.outcome, matched.analysis_weight, grid, tau, spec.h_tau)
    return QuantileCurve(tau, grid, est, kind="smoothed")


def qerf_empirical_curve(matched, grid, tau) -> QuantileCurve:
    """Empirical estimator on a grid; points with an empty window are NaN."""
    est = np.empty(len(grid))
    for i, g in enumerate(grid):
        try:
            est[i] = qerf_empirical(matched, g, tau)
        except EmptyWindow:
            est[i] = np.nan
    return QuantileCurve(tau, grid, est, kind="empirical")


def qee(estimator, w, w_prime) -> float:
    """``q(w) - q(w')`` for a QERF estimator.

    ``estimator`` is a callable mapping an exposure array to estimates, an
    object with ``predict``, or a :class:`QuantileCurve` containing both points.
    """
    if isinstance(estimator, QuantileCurve):
        return estimator.at(w) - estimator.at(w_prime)
    fn = estimator.predict if hasattr(estimator, "predict") else estimator
    vals = np.asarray(fn(np.array([w, w_prime], dtype=float)), dtype=float)
    vals = vals.reshape(2, -1)[:, 0]
    return float(vals[0] - vals[1])


class KernelQuantileRegressor(RegressorMixin, BaseEstimator):
    """Weighted quantile regression of ``y`` on a scalar exposure.

    ``kind="smoothed"`` fits a Gaussian-kernel local constant; ``"empirical"``
    takes the weighted quantile inside ``[w - delta, w + delta]``.

    Parameters
    ----------
    tau : float
    kind : {"smoothed", "empirical"}
    h_mean : float, optional
        Mean-regression bandwidth. Selected by LOO-CV over ``h_grid`` when
        omitted; the kernel then uses the tau-adjusted bandwidth.
    h_grid : array-like, optional
    delta : float, optional
        Window half-width, required for ``kind="empirical"``.
    """

    def __init__(self, tau=0.5, kind="smoothed", h_mean=None, h_grid=None, delta=None):
        self.tau = tau
        self.kind = kind
        self.h_mean = h_mean
        self.h_grid = h_grid
        self.delta = delta

    def fit(self, w, y, sample_weight=None):
        w = check_vector(np.ravel(w) if np.ndim(w) == 2 and np.shape(w)[1] == 1 else w, "exposure")
        y = check_vector(y, "outcome")
        if y.shape != w.shape:
            raise ValidationError("exposure and outcome lengths differ")
        weight = check_weights(sample_weight, w.shape[0], allow_zero=True)
        check_tau(self.tau)
        self.x_, self.y_, self.weight_ = w, y, weight
        if self.kind == "smoothed":
            h = self.h_mean if self.h_mean is not None else select_bandwidth(w, y, weight, self.h_grid)
            self.bandwidth_ = adjust_bandwidth(h, self.tau)
        elif self.kind == "empirical":
            if self.delta is None or not self.delta > 0:
                raise ValidationError("empirical fits need a positive delta")
        else:
            raise ValidationError(f"unknown kind {self.kind!r}")
        return self

    def predict(self, w):
        check_is_fitted(self, "x_")
        grid = np.ravel(np.asarray(w, dtype=float))
        if self.kind == "smoothed":
            return kernel_quantile(self.x_, self.y_, self.weight_, grid, self.tau, self.bandwidth_.h_tau)
        out = np.empty(grid.shape[0])
        for i, g in enumerate(grid):
            mask = (self.x_ >= g - self.delta) & (self.x_ <= g + self.delta)
            wt = self.weight_ * mask
            out[i] = weighted_quantile(self.y_, wt, self.tau) if wt.sum() > 0 else np.nan
        return out
