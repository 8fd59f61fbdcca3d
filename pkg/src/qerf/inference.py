"""Plug-in variance of the matching QERF estimator and weighted-bootstrap bands."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from joblib import Parallel, delayed
from sklearn.base import clone

from ._validation import check_tau
from .dataset import ObservationalDataset, format_number
from .exceptions import (
    DegenerateSample,
    DensityFloorHit,
    EmptyWindow,
    InsufficientNeighbors,
    QERFError,
    ReplicateFailure,
    ValidationError,
)
from .gps import silverman_bandwidth
from .matching import standardize
from .quantile import QuantileCurve, qerf_empirical

logger = logging.getLogger(__name__)

DENSITY_FLOOR = 1e-8
MAX_FAILED_FRACTION = 0.2


def _neighbour_coordinates(matched):
    if matched.gps_observed is None:
        raise ValidationError("matched dataset lacks observed GPS values needed for the neighbour metric")
    return standardize(matched.gps_observed), standardize(matched.source.exposure)


def conditional_variance_mnn(matched, q, w, M=1) -> np.ndarray:
    """Matching estimate of ``F(q | w, e) (1 - F(q | w, e))`` for units in the window of ``w``.

    For each unit ``j`` in ``[w - delta, w + delta]`` the ``M`` closest other
    in-window units (matching metric, ties to the lower index) give

        M/(M+1) * (1(Y_j <= q) - mean_m 1(Y_{l_m(j)} <= q))^2

    Units outside the window get 0.
    """
    ds = matched.source
    if ds.outcome is None:
        raise ValidationError("outcome required")
    M = int(M)
    if M < 1:
        raise ValidationError("M must be a positive integer")
    idx = np.flatnonzero(matched.in_window(w))
    if idx.size < M + 1:
        raise InsufficientNeighbors(f"window around {w} holds {idx.size} units, need at least {M + 1}")
    e_std, w_std = _neighbour_coordinates(matched)
    lam = matched.scale
    ind = (ds.outcome[idx] <= q).astype(float)
    e, x = e_std[idx], w_std[idx]
    out = np.zeros(ds.n_units)
    step = max(1, 4_000_000 // idx.size)
    for s in range(0, idx.size, step):
        rows = np.arange(s, min(idx.size, s + step))
        d = lam * np.abs(e[rows, None] - e[None, :]) + (1.0 - lam) * np.abs(x[rows, None] - x[None, :])
        d[np.arange(rows.size), rows] = np.inf
        nbrs = np.argsort(d, axis=1, kind="stable")[:, :M]
        dev = ind[rows] - ind[nbrs].mean(axis=1)
        out[idx[rows]] = M / (M + 1.0) * dev**2
    return out


def density_weighted_kde(matched, y, w, h1=None):
    """``(1/N) sum_j K_j u_j 1_j(w, delta) phi((Y_j - y) / h1) / h1``.

    ``h1`` defaults to Silverman's rule on the in-window outcomes weighted by
    ``K_j * u_j``.
    """
    ds = matched.source
    if ds.outcome is None:
        raise ValidationError("outcome required")
    a = matched.analysis_weight * matched.in_window(w)
    if not a.sum() > 0:
        raise EmptyWindow(f"no matched unit with exposure within {matched.delta} of {w}")
    if h1 is None:
        h1 = default_h1(matched, w)
    if not h1 > 0:
        raise ValidationError("h1 must be positive")
    keep = a > 0
    yy = np.atleast_1d(np.asarray(y, dtype=float))
    z = (ds.outcome[keep][None, :] - yy[:, None]) / h1
    f = (np.exp(-0.5 * z * z) @ a[keep]) / (h1 * np.sqrt(2.0 * np.pi) * ds.n_units)
    return float(f[0]) if np.ndim(y) == 0 else f


def default_h1(matched, w) -> float:
    """Silverman bandwidth of the in-window outcomes weighted by ``K_j * unit_weight``."""
    a = matched.analysis_weight * matched.in_window(w)
    keep = a > 0
    try:
        return silverman_bandwidth(matched.source.outcome[keep], a[keep])
    except DegenerateSample as exc:
        raise InsufficientNeighbors(f"cannot choose h1 at w={w}: {exc}") from None


@dataclass(frozen=True)
class VarianceEstimate:
    w: float
    tau: float
    estimate: float
    sigma2: float
    density_at_q: float
    m_neighbors: int
    n_units: int
    delta: float

    @property
    def se(self) -> float:
        """Standard error of the QERF estimate, ``sqrt(sigma2 / (N * delta))``."""
        return float(np.sqrt(self.sigma2 / (self.n_units * self.delta)))


def variance_qerf(matched, w, tau, M=1, h1=None) -> VarianceEstimate:
    """Plug-in asymptotic variance of the empirical QERF estimator at ``w``."""
    tau = check_tau(tau)
    q = qerf_empirical(matched, w, tau)
    f = density_weighted_kde(matched, q, w, h1)
    if not f > DENSITY_FLOOR:
        raise DensityFloorHit(f"outcome density estimate {f:.3g} at q={q:.6g}, w={w} is below {DENSITY_FLOOR}")
    s2 = conditional_variance_mnn(matched, q, w, M)
    kw = matched.analysis_weight * matched.in_window(w)
    n = matched.n_units
    sigma2 = float(np.sum(matched.delta * kw**2 * s2) / n / f**2)
    return VarianceEstimate(float(w), tau, q, sigma2, float(f), int(M), n, matched.delta)


def qee_variance(var_w: VarianceEstimate, var_wprime: VarianceEstimate) -> float:
    return float(var_w.sigma2 + var_wprime.sigma2)


def write_variance_csv(estimates, path):
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["w", "tau", "estimate", "se", "density_at_q", "M"])
        for v in estimates:
            writer.writerow([format_number(v.w), format_number(v.tau), format_number(v.estimate),
                             format_number(v.se), format_number(v.density_at_q), v.m_neighbors])


# -- weighted bootstrap -------------------------------------------------------


@dataclass(eq=False)
class BootstrapBands:
    """Pointwise percentile bands from exponential-weight bootstrap replicates.

    ``replicates`` has shape ``(B_ok, n_points, n_taus)``.
    """

    points: np.ndarray
    taus: tuple
    estimate: np.ndarray
    replicates: np.ndarray
    alpha: float
    seed: int
    n_failed: int = 0

    def _q(self, p, reps=None):
        reps = self.replicates if reps is None else reps
        return np.quantile(reps, p, axis=0)

    @property
    def lower(self) -> np.ndarray:
        return self._q(self.alpha / 2.0)

    @property
    def upper(self) -> np.ndarray:
        return self._q(1.0 - self.alpha / 2.0)

    def with_alpha(self, alpha) -> "BootstrapBands":
        return BootstrapBands(self.points, self.taus, self.estimate, self.replicates, alpha, self.seed, self.n_failed)

    def curves(self, n_grid=None) -> list:
        """QERF curves with bands over the first ``n_grid`` points (all by default)."""
        n = self.points.shape[0] if n_grid is None else n_grid
        lo, hi = self.lower, self.upper
        return [QuantileCurve(t, self.points[:n], self.estimate[:n, k], lo[:n, k], hi[:n, k])
                for k, t in enumerate(self.taus)]

    def qee_curves(self, index_w, index_wprime, grid=None) -> list:
        """QEE ``q(points[i]) - q(points[i'])`` with bands from the replicate differences."""
        index_w = np.asarray(index_w)
        index_wprime = np.asarray(index_wprime)
        diff = self.replicates[:, index_w, :] - self.replicates[:, index_wprime, :]
        est = self.estimate[index_w] - self.estimate[index_wprime]
        lo = self._q(self.alpha / 2.0, diff)
        hi = self._q(1.0 - self.alpha / 2.0, diff)
        grid = self.points[index_w] if grid is None else grid
        return [QuantileCurve(t, grid, est[:, k], lo[:, k], hi[:, k]) for k, t in enumerate(self.taus)]


def _replicate(estimator, ds: ObservationalDataset, points, seed):
    rng = np.random.default_rng(seed)
    xi = rng.standard_exponential(ds.n_units)
    try:
        fit = clone(estimator).fit_dataset(ds.with_weights(ds.unit_weight * xi))
        return fit.predict(points)
    except QERFError as exc:
        logger.warning("bootstrap replicate failed: %s", exc)
        return None


def replicate_seeds(seed, B):
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(B)]


def bootstrap_bands(ds: ObservationalDataset, pipeline, points, B=50, alpha=0.05, seed=0,
                    n_jobs=None, seeds: Optional[list] = None) -> BootstrapBands:
    """Exponential(1) weighted bootstrap of a :class:`~qerf.estimator.MatchingQERF` pipeline.

    The pipeline is fitted once on ``ds``; its tuned caliper, scale and
    bandwidth are then held fixed while every replicate refits the GPS, the
    matching and the quantile curves with unit weights multiplied by i.i.d.
    standard exponential draws. ``seeds`` overrides the per-replicate seeds.
    """
    if B < 2:
        raise ValidationError("need at least 2 bootstrap replicates")
    if not 0.0 < alpha < 1.0:
        raise ValidationError("alpha must lie in (0, 1)")
    points = np.asarray(points, dtype=float)
    base = pipeline if hasattr(pipeline, "matched_") else clone(pipeline).fit_dataset(ds)
    estimate = base.predict(points)
    frozen = clone(base).set_params(**base.frozen_params())
    seeds = replicate_seeds(seed, B) if seeds is None else list(seeds)
    if len(seeds) != B:
        raise ValidationError("need one seed per replicate")
    out = Parallel(n_jobs=n_jobs)(delayed(_replicate)(frozen, ds, points, s) for s in seeds)
    ok = [r for r in out if r is not None]
    failed = B - len(ok)
    if failed > MAX_FAILED_FRACTION * B or len(ok) < 2:
        raise ReplicateFailure(failed, B)
    return BootstrapBands(points, base.taus_, estimate, np.stack(ok), alpha, seed, failed)
