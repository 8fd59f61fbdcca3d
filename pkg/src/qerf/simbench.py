"""Simulation scenarios, Monte-Carlo truth, the IPTW comparator and the AB/RMSE benchmark."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
from joblib import Parallel, delayed

from ._validation import check_tau
from .dataset import ObservationalDataset, format_number
from .estimator import MatchingQERF
from .exceptions import GpsUnderflow, QERFError, ReplicateFailure, ValidationError
from .gps import GpsModel, MarginalDensity, evaluate_marginal, fit_linear_gps, fit_marginal_density
from .matching import DEFAULT_DELTA_GRID, DEFAULT_SCALE_GRID
from .quantile import QuantileCurve, adjust_bandwidth, kernel_quantile, select_bandwidth, weighted_quantile

logger = logging.getLogger(__name__)

EXPOSURE_INTERCEPT = -0.8
EXPOSURE_COEF = np.array([0.1, 0.1, -0.1, 0.2, 0.1, 0.1])
OUTCOME_INTERCEPT = -1.0
OUTCOME_COEF = np.array([2.0, 2.0, 3.0, -1.0, 2.0, 2.0])
CUBIC_COEF = 0.13**2
GPS_FLOOR = 1e-300
MAX_DROP_FRACTION = 0.1
N_GRID = 50
TRIM_MASS = 0.05


@dataclass(frozen=True)
class Scenario:
    """One data-generating process of the simulation study.

    Parameters
    ----------
    id : {"A", "B", "C", "D"}
    alpha : float
        Heteroscedasticity, the outcome noise is multiplied by ``1 + alpha * W``.
    exposure_noise : {"normal", "t2"}
    outcome_noise : {"normal", "3t3", "lognormal", "2chi2"}
    normal_scale : {"sd", "variance"}
        How the second argument of ``N(0, 5)`` is read.
    lognormal_scale : {"variance", "sd"}
        How the second argument of ``LN(2.1, 4.5)`` is read.
    c5_support : {"integers", "two-point"}
        ``C5`` uniform on ``{-2, ..., 2}`` or on ``{-2, 2}``.
    """

    id: str
    alpha: float
    exposure_noise: str
    outcome_noise: str
    normal_scale: str = "sd"
    lognormal_scale: str = "variance"
    c5_support: str = "integers"

    def __post_init__(self):
        if self.exposure_noise not in ("normal", "t2"):
            raise ValidationError(f"unknown exposure noise {self.exposure_noise!r}")
        if self.outcome_noise not in ("normal", "3t3", "lognormal", "2chi2"):
            raise ValidationError(f"unknown outcome noise {self.outcome_noise!r}")
        if self.normal_scale not in ("sd", "variance") or self.lognormal_scale not in ("sd", "variance"):
            raise ValidationError("scale readings must be 'sd' or 'variance'")
        if self.c5_support not in ("integers", "two-point"):
            raise ValidationError(f"unknown C5 support {self.c5_support!r}")

    def with_options(self, **kw) -> "Scenario":
        return replace(self, **kw)

    @property
    def normal_sd(self) -> float:
        return 5.0 if self.normal_scale == "sd" else float(np.sqrt(5.0))

    @property
    def lognormal_sigma(self) -> float:
        return float(np.sqrt(4.5)) if self.lognormal_scale == "variance" else 4.5


SCENARIOS = {
    "A": Scenario("A", 0.0, "normal", "normal"),
    "B": Scenario("B", 0.0, "t2", "3t3"),
    "C": Scenario("C", 0.0, "t2", "lognormal"),
    "D": Scenario("D", 0.15, "t2", "2chi2"),
}


def get_scenario(s) -> Scenario:
    if isinstance(s, Scenario):
        return s
    try:
        return SCENARIOS[str(s).upper()]
    except KeyError:
        raise ValidationError(f"unknown scenario {s!r}; expected one of {sorted(SCENARIOS)}") from None


# -- data-generating process --------------------------------------------------


def draw_covariates(s: Scenario, n, rng) -> np.ndarray:
    C = np.empty((n, 6))
    C[:, :4] = rng.standard_normal((n, 4))
    support = np.arange(-2, 3) if s.c5_support == "integers" else np.array([-2, 2])
    C[:, 4] = rng.choice(support, size=n)
    C[:, 5] = rng.uniform(-3.0, 3.0, size=n)
    return C


def draw_exposure_noise(s: Scenario, n, rng) -> np.ndarray:
    if s.exposure_noise == "normal":
        return s.normal_sd * rng.standard_normal(n)
    return rng.standard_t(2, size=n)


def draw_outcome_noise(s: Scenario, n, rng) -> np.ndarray:
    if s.outcome_noise == "normal":
        return s.normal_sd * rng.standard_normal(n)
    if s.outcome_noise == "3t3":
        return 3.0 * rng.standard_t(3, size=n)
    if s.outcome_noise == "lognormal":
        return rng.lognormal(2.1, s.lognormal_sigma, size=n)
    return 2.0 * rng.chisquare(3, size=n)


def exposure_from(C, noise) -> np.ndarray:
    return EXPOSURE_INTERCEPT + C @ EXPOSURE_COEF + noise


def outcome_from(C, w, noise, alpha) -> np.ndarray:
    """Outcome formula; ``w`` is the realised or the intervened exposure."""
    effect = 0.1 - 0.1 * C[:, 0] + 0.1 * C[:, 3] + 0.1 * C[:, 4] + 0.1 * C[:, 2] ** 2
    return OUTCOME_INTERCEPT - C @ OUTCOME_COEF - w * effect + CUBIC_COEF * w**3 + (1.0 + alpha * w) * noise


def generate_scenario(s, n, seed) -> ObservationalDataset:
    """Draw ``n`` units from scenario ``s``; covariates are named ``c1``..``c6``."""
    s = get_scenario(s)
    if n < 2:
        raise ValidationError("a dataset needs at least two units")
    rng = np.random.default_rng(seed)
    C = draw_covariates(s, n, rng)
    w = exposure_from(C, draw_exposure_noise(s, n, rng))
    y = outcome_from(C, w, draw_outcome_noise(s, n, rng), s.alpha)
    return ObservationalDataset(exposure=w, covariates=C, outcome=y,
                                covariate_names=tuple(f"c{k}" for k in range(1, 7)))


# -- truth ---------------------------------------------------------------------


@lru_cache(maxsize=8)
def _truth_sample(s: Scenario, R: int, seed: int):
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7919]))
    C = draw_covariates(s, R, rng)
    eps = draw_outcome_noise(s, R, rng)
    C.setflags(write=False)
    eps.setflags(write=False)
    return C, eps


def true_qerf_matrix(s, grid, taus, R=100_000, seed=0) -> np.ndarray:
    """True quantiles of ``Y(w)`` as an array of shape ``(len(grid), len(taus))``.

    One Monte-Carlo sample of ``(C, eps_Y)`` of size ``R`` serves every grid
    point and every tau, so curves for different taus never cross.
    """
    s = get_scenario(s)
    if R < 10_000:
        raise ValidationError("the truth needs at least 10^4 Monte-Carlo draws")
    taus = [check_tau(t) for t in np.atleast_1d(taus)]
    C, eps = _truth_sample(s, int(R), int(seed))
    grid = np.atleast_1d(np.asarray(grid, dtype=float))
    out = np.empty((grid.shape[0], len(taus)))
    for i, w in enumerate(grid):
        y = outcome_from(C, w, eps, s.alpha)
        out[i] = np.quantile(y, taus, method="inverted_cdf")
    return out


def true_qerf(s, grid, tau, R=100_000, seed=0):
    """Monte-Carlo truth as a :class:`QuantileCurve` (a list of curves for a sequence of taus)."""
    grid = np.asarray(grid, dtype=float)
    vals = true_qerf_matrix(s, grid, tau, R, seed)
    curves = [QuantileCurve(t, grid, vals[:, k], kind="truth") for k, t in enumerate(np.atleast_1d(tau))]
    return curves[0] if np.ndim(tau) == 0 else curves


# -- IPTW comparator -----------------------------------------------------------


def stabilized_weights(ds: ObservationalDataset, gps: GpsModel, md: MarginalDensity) -> np.ndarray:
    """Marginal exposure density over the GPS at each unit."""
    e = gps.density(ds.exposure, ds.covariates)
    if np.any(e < GPS_FLOOR):
        raise GpsUnderflow(f"{int(np.sum(e < GPS_FLOOR))} units have GPS below {GPS_FLOOR}")
    return evaluate_marginal(md, ds.exposure) / e


def log_stabilized_weights(ds: ObservationalDataset, gps: GpsModel, md: MarginalDensity) -> np.ndarray:
    """Logarithm of :func:`stabilized_weights`, finite even where the GPS underflows."""
    return np.log(evaluate_marginal(md, ds.exposure)) - gps.log_density(ds.exposure, ds.covariates)


def iptw_qerf(ds, gps, md, grid, tau, h=None, gps_floor=GPS_FLOOR) -> QuantileCurve:
    """Kernel quantile fit over the unmatched data with stabilized inverse-GPS weights.

    ``h`` is the kernel bandwidth itself. When omitted, the mean-regression
    bandwidth is chosen by LOO-CV with the IPTW weights and rescaled for
    ``tau``. With the default ``gps_floor`` a GPS value below it raises
    :class:`GpsUnderflow`; ``gps_floor=None`` evaluates the weights in log
    space instead, so units with an astronomically small GPS keep their
    correspondingly huge weight.
    """
    tau = check_tau(tau)
    if ds.outcome is None:
        raise ValidationError("outcome required")
    if gps_floor is None:
        lw = log_stabilized_weights(ds, gps, md) + np.log(ds.unit_weight)
    else:
        e = gps.density(ds.exposure, ds.covariates)
        if np.any(e < gps_floor):
            raise GpsUnderflow(f"{int(np.sum(e < gps_floor))} units have GPS below {gps_floor}")
        lw = np.log(evaluate_marginal(md, ds.exposure) / e * ds.unit_weight)
    if h is None:
        h = adjust_bandwidth(select_bandwidth(ds.exposure, ds.outcome, None, log_weight=lw), tau).h_tau
    grid = np.asarray(grid, dtype=float)
    est = kernel_quantile(ds.exposure, ds.outcome, None, grid, tau, h, log_weight=lw)
    return QuantileCurve(tau, grid, est, kind="iptw")


# -- benchmark -----------------------------------------------------------------


@dataclass
class RepContext:
    """Everything an estimator may use for one replication."""

    scenario: Scenario
    ds: ObservationalDataset
    grid: np.ndarray
    taus: tuple
    truth: np.ndarray
    delta_grid: Sequence[float]
    scale_grid: Sequence[float]
    _cache: dict = field(default_factory=dict)

    def matching(self, kind) -> MatchingQERF:
        # the design is tuned once per replication and shared by both matching estimators
        if "design" not in self._cache:
            base = MatchingQERF(taus=self.taus, kind="empirical", delta_grid=self.delta_grid,
                                scale_grid=self.scale_grid).fit_dataset(self.ds)
            self._cache["design"] = base.config_
        cfg = self._cache["design"]
        return MatchingQERF(taus=self.taus, kind=kind, delta=cfg.delta, scale=cfg.scale).fit_dataset(self.ds)


def _est_matching(ctx: RepContext) -> np.ndarray:
    return ctx.matching("empirical").predict(ctx.grid)


def _est_matching_s(ctx: RepContext) -> np.ndarray:
    return ctx.matching("smoothed").predict(ctx.grid)


def _est_iptw(ctx: RepContext) -> np.ndarray:
    # log-space weights: heavy-tailed exposures push the fitted GPS below the float range
    gps = fit_linear_gps(ctx.ds)
    md = fit_marginal_density(ctx.ds)
    lw = log_stabilized_weights(ctx.ds, gps, md) + np.log(ctx.ds.unit_weight)
    h_mean = select_bandwidth(ctx.ds.exposure, ctx.ds.outcome, None, log_weight=lw)
    return np.column_stack([
        iptw_qerf(ctx.ds, gps, md, ctx.grid, t, adjust_bandwidth(h_mean, t).h_tau, gps_floor=None).estimate
        for t in ctx.taus
    ])


def _est_oracle(ctx: RepContext) -> np.ndarray:
    return ctx.truth.copy()


ESTIMATORS: dict = {
    "matching": _est_matching,
    "matching-s": _est_matching_s,
    "iptw": _est_iptw,
    "oracle": _est_oracle,
}
DEFAULT_ESTIMATORS = ("matching", "matching-s", "iptw")


def evaluation_grid(ds: ObservationalDataset, size=N_GRID, trim=TRIM_MASS) -> np.ndarray:
    """``size`` equally spaced points between the weighted ``trim`` and ``1 - trim`` exposure percentiles."""
    lo = weighted_quantile(ds.exposure, ds.unit_weight, trim)
    hi = weighted_quantile(ds.exposure, ds.unit_weight, 1.0 - trim)
    return np.linspace(lo, hi, size)


def rep_seed(seed, scenario_id, n, rep) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), ord(scenario_id), int(n), int(rep)])


def _run_rep(s, n, rep, seed, taus, estimators, R, delta_grid, scale_grid):
    ss = rep_seed(seed, s.id, n, rep)
    ds = generate_scenario(s, n, ss)
    grid = evaluation_grid(ds)
    truth = true_qerf_matrix(s, grid, taus, R, seed)
    ctx = RepContext(s, ds, grid, tuple(taus), truth, delta_grid, scale_grid)
    out = {}
    try:
        for name, fn in estimators.items():
            est = np.asarray(fn(ctx), dtype=float).reshape(grid.shape[0], len(taus))
            if not np.all(np.isfinite(est)):
                raise ValidationError(f"{name} returned non-finite estimates")
            out[name] = est - truth
    except QERFError as exc:
        logger.warning("scenario %s, N=%d, rep %d dropped: %s", s.id, n, rep, exc)
        return None
    return out


@dataclass(frozen=True)
class BenchmarkRow:
    scenario: str
    n: int
    estimator: str
    target: str  # "qerf" or "qee"
    tau: str  # formatted tau or "Average"
    ab: float
    rmse: float
    reps: int


@dataclass(eq=False)
class BenchmarkResult:
    """AB/RMSE table plus the raw per-replication error arrays.

    ``errors[(scenario, n, estimator)]`` has shape ``(reps, grid, taus)``.
    """

    rows: list
    taus: tuple
    errors: dict
    dropped: dict

    def select(self, **kw) -> list:
        return [r for r in self.rows if all(getattr(r, k) == v for k, v in kw.items())]

    def value(self, scenario, n, estimator, target="qerf", tau="Average", metric="rmse") -> float:
        tau = tau if isinstance(tau, str) else format_number(tau)
        hit = self.select(scenario=scenario, n=n, estimator=estimator, target=target, tau=tau)
        if not hit:
            raise KeyError((scenario, n, estimator, target, tau))
        return getattr(hit[0], metric)

    def to_csv(self, path):
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["scenario", "n", "estimator", "target", "tau", "ab", "rmse", "reps"])
            for r in self.rows:
                writer.writerow([r.scenario, r.n, r.estimator, r.target, r.tau,
                                 format_number(r.ab), format_number(r.rmse), r.reps])

    def render(self) -> str:
        """Plain-text tables, one block per (scenario, N); cells read ``AB (RMSE)``."""
        keys = list(dict.fromkeys((r.scenario, r.n) for r in self.rows))
        blocks = []
        for scen, n in keys:
            rows = self.select(scenario=scen, n=n)
            lines = [f"Scenario {scen}, N={n}, reps={rows[0].reps}"]
            for target in ("qerf", "qee"):
                sub = [r for r in rows if r.target == target]
                cols = list(dict.fromkeys(r.tau for r in sub))
                lines.append(target.upper().ljust(12) + "".join(
                    (c if c == "Average" else f"tau={c}").rjust(20) for c in cols))
                for e in dict.fromkeys(r.estimator for r in sub):
                    cells = {r.tau: r for r in sub if r.estimator == e}
                    lines.append(e.ljust(12) + "".join(
                        f"{cells[c].ab:.3f} ({cells[c].rmse:.3f})".rjust(20) for c in cols))
            blocks.append("\n".join(lines))
        return "\n\n".join(blocks) + "\n"

    def write_text(self, path):
        Path(path).write_text(self.render())


def ab_rmse(errors) -> tuple:
    """``errors`` has shape ``(reps, grid)``; returns (AB, RMSE)."""
    errors = np.asarray(errors, dtype=float)
    ab = float(np.mean(np.abs(errors.mean(axis=0))))
    rmse = float(np.sqrt(np.mean(errors**2)))
    return ab, rmse


def _rows_for(scen, n, name, err, taus, reps):
    rows = []
    for target, e in (("qerf", err), ("qee", np.diff(err, axis=1))):
        abs_, rmses = [], []
        for k, t in enumerate(taus):
            ab, rmse = ab_rmse(e[:, :, k])
            abs_.append(ab)
            rmses.append(rmse)
            rows.append(BenchmarkRow(scen, n, name, target, format_number(t), ab, rmse, reps))
        rows.append(BenchmarkRow(scen, n, name, target, "Average", float(np.mean(abs_)), float(np.mean(rmses)), reps))
    return rows


def run_benchmark(scenarios=("A",), ns=(1000,), taus=(0.1, 0.5, 0.9), reps=100, seed=0,
                  estimators: Optional[Sequence | Mapping[str, Callable]] = None, n_jobs=None,
                  R=100_000, delta_grid=DEFAULT_DELTA_GRID, scale_grid=DEFAULT_SCALE_GRID) -> BenchmarkResult:
    """AB and RMSE of QERF and QEE estimates over repeated simulated datasets.

    Each replication draws a dataset, evaluates every estimator on 50 equally
    spaced points between the 5th and 95th exposure percentiles and records
    the error against the Monte-Carlo truth on that grid. AB averages over the
    grid the absolute mean-over-replications error; RMSE is the root of the
    grid and replication averaged squared error. QEE errors are the
    differences of QERF errors at consecutive grid points. Replication seeds
    depend only on ``(seed, scenario, N, rep)``, never on the worker count.

    ``estimators`` holds names from :data:`ESTIMATORS` or a mapping from name
    to a callable ``f(ctx: RepContext) -> (grid, taus) array``.
    """
    if reps < 1:
        raise ValidationError("reps must be at least 1")
    taus = tuple(check_tau(t) for t in taus)
    if estimators is None:
        estimators = DEFAULT_ESTIMATORS
    if not isinstance(estimators, Mapping):
        unknown = [e for e in estimators if e not in ESTIMATORS]
        if unknown:
            raise ValidationError(f"unknown estimators {unknown}; choose from {sorted(ESTIMATORS)}")
        estimators = {e: ESTIMATORS[e] for e in estimators}
    scen = [get_scenario(s) for s in scenarios]
    jobs = [(s, int(n), r) for s in scen for n in ns for r in range(reps)]
    results = Parallel(n_jobs=n_jobs)(
        delayed(_run_rep)(s, n, r, seed, taus, estimators, R, delta_grid, scale_grid) for s, n, r in jobs
    )
    rows, errors, dropped = [], {}, {}
    for s in scen:
        for n in ns:
            n = int(n)
            got = [res for (js, jn, _), res in zip(jobs, results) if js == s and jn == n]
            ok = [g for g in got if g is not None]
            dropped[(s.id, n)] = len(got) - len(ok)
            if len(got) - len(ok) > MAX_DROP_FRACTION * len(got) or not ok:
                raise ReplicateFailure(len(got) - len(ok), len(got),
                                       f"scenario {s.id}, N={n}: too many replications failed")
            for name in estimators:
                err = np.stack([g[name] for g in ok])
                errors[(s.id, n, name)] = err
                rows.extend(_rows_for(s.id, n, name, err, taus, len(ok)))
    return BenchmarkResult(rows, taus, errors, dropped)
