from fractions import Fraction

import numpy as np
import pytest
from scipy.stats import norm

from qerf.dataset import ObservationalDataset
from qerf.exceptions import GpsUnderflow, ReplicateFailure, ValidationError
from qerf.gps import GpsModel, fit_linear_gps, fit_marginal_density
from qerf.quantile import kernel_quantile
from qerf.simbench import (
    SCENARIOS,
    BenchmarkResult,
    ab_rmse,
    draw_covariates,
    draw_outcome_noise,
    evaluation_grid,
    exposure_from,
    generate_scenario,
    get_scenario,
    iptw_qerf,
    outcome_from,
    rep_seed,
    run_benchmark,
    stabilized_weights,
    true_qerf,
    true_qerf_matrix,
)


def test_zero_hook_matches_exact_arithmetic():
    C = np.zeros((1, 6))
    w = exposure_from(C, np.zeros(1))
    assert w[0] == pytest.approx(-0.8, abs=1e-15)
    wf = Fraction(-8, 10)
    exact = -1 - wf * Fraction(1, 10) + Fraction(13, 100) ** 2 * wf**3
    y = outcome_from(C, w, np.zeros(1), 0.0)
    assert y[0] == pytest.approx(float(exact), abs=1e-12)
    assert float(exact) == pytest.approx(-0.9286528, abs=1e-9)


def test_outcome_formula_term_by_term():
    rng = np.random.default_rng(0)
    C = rng.standard_normal((5, 6))
    w = rng.standard_normal(5)
    eps = rng.standard_normal(5)
    y = outcome_from(C, w, eps, 0.15)
    for i in range(5):
        c = C[i]
        lin = 2 * c[0] + 2 * c[1] + 3 * c[2] - c[3] + 2 * c[4] + 2 * c[5]
        eff = 0.1 - 0.1 * c[0] + 0.1 * c[3] + 0.1 * c[4] + 0.1 * c[2] ** 2
        want = -1 - lin - w[i] * eff + 0.13**2 * w[i] ** 3 + (1 + 0.15 * w[i]) * eps[i]
        assert y[i] == pytest.approx(want, rel=1e-12)


def test_covariate_laws():
    C = draw_covariates(SCENARIOS["A"], 100_000, np.random.default_rng(1))
    assert -0.03 <= C[:, 5].mean() <= 0.03
    assert 2.9 <= C[:, 5].var() <= 3.1
    assert set(np.unique(C[:, 4])) == {-2, -1, 0, 1, 2}
    two = draw_covariates(SCENARIOS["A"].with_options(c5_support="two-point"), 1000, np.random.default_rng(1))
    assert set(np.unique(two[:, 4])) == {-2, 2}


def test_noise_laws():
    rng = np.random.default_rng(2)
    assert np.all(draw_outcome_noise(SCENARIOS["D"], 10_000, rng) >= 0)
    assert np.all(draw_outcome_noise(SCENARIOS["C"], 10_000, rng) > 0)
    a = draw_outcome_noise(SCENARIOS["A"], 100_000, rng)
    assert a.std() == pytest.approx(5.0, rel=0.02)
    v = draw_outcome_noise(SCENARIOS["A"].with_options(normal_scale="variance"), 100_000, rng)
    assert v.std() == pytest.approx(np.sqrt(5.0), rel=0.02)


def test_generate_is_reproducible():
    a = generate_scenario("B", 50, 4)
    b = generate_scenario("b", 50, 4)
    c = generate_scenario("B", 50, 5)
    for col in ("exposure", "outcome", "covariates"):
        np.testing.assert_array_equal(getattr(a, col), getattr(b, col))
        assert np.all(getattr(a, col) != getattr(c, col)) or col == "covariates"
    assert np.all(a.covariates[:, [0, 1, 2, 3, 5]] != c.covariates[:, [0, 1, 2, 3, 5]])
    assert a.covariate_names == ("c1", "c2", "c3", "c4", "c5", "c6")
    with pytest.raises(ValidationError):
        generate_scenario("A", 1, 0)
    with pytest.raises(ValidationError):
        get_scenario("E")


def test_truth_at_zero_exposure_is_near_minus_one():
    assert abs(true_qerf("A", [0.0], 0.5, R=100_000).estimate[0] + 1.0) <= 0.05


def test_truth_curves_do_not_cross():
    grid = np.linspace(-10, 10, 21)
    for s in "ABCD":
        t = true_qerf_matrix(s, grid, (0.1, 0.5, 0.9), R=20_000)
        assert np.all(np.diff(t, axis=1) >= 0)


def test_truth_stable_under_doubling_draws():
    grid = np.array([-5.0, 0.0, 5.0])
    a = true_qerf_matrix("A", grid, (0.5,), R=50_000, seed=1)[:, 0]
    b = true_qerf_matrix("A", grid, (0.5,), R=100_000, seed=2)[:, 0]
    # binomial-quantile SE of a median: sqrt(p(1-p)/R) / f(q), with f from a normal fit to Y(w)
    C = draw_covariates(SCENARIOS["A"], 100_000, np.random.default_rng(3))
    eps = draw_outcome_noise(SCENARIOS["A"], 100_000, np.random.default_rng(4))
    for i, w in enumerate(grid):
        y = outcome_from(C, np.full(C.shape[0], w), eps, 0.0)
        f = norm.pdf(0, scale=y.std())
        se = np.sqrt(0.25 / 50_000) / f
        assert abs(a[i] - b[i]) <= 3 * se
    with pytest.raises(ValidationError):
        true_qerf_matrix("A", grid, (0.5,), R=1000)


class _GpsAsMarginal:
    """A marginal density that equals the GPS of a covariate-free exposure model."""

    def __init__(self, gps, scale=1.0):
        self.gps, self.scale = gps, scale

    def __call__(self, w):
        w = np.atleast_1d(w)
        return self.scale * self.gps.density(w, np.zeros((w.size, 1)))


def test_iptw_identity_and_scale_free():
    rng = np.random.default_rng(5)
    n = 60
    w = rng.standard_normal(n) * 2
    y = w + rng.standard_normal(n)
    ds = ObservationalDataset(exposure=w, covariates=rng.standard_normal((n, 1)), outcome=y)
    gps = GpsModel(intercept=0.0, coefficients=np.zeros(1), residual_sd=2.0)
    md = _GpsAsMarginal(gps)
    np.testing.assert_allclose(stabilized_weights(ds, gps, md), 1.0)
    grid = np.linspace(-2, 2, 9)
    got = iptw_qerf(ds, gps, md, grid, 0.5, h=0.8)
    np.testing.assert_array_equal(got.estimate, kernel_quantile(w, y, np.ones(n), grid, 0.5, 0.8))
    scaled = iptw_qerf(ds, gps, _GpsAsMarginal(gps, 37.5), grid, 0.5, h=0.8)
    np.testing.assert_array_equal(scaled.estimate, got.estimate)
    log_path = iptw_qerf(ds, gps, md, grid, 0.5, h=0.8, gps_floor=None)
    np.testing.assert_array_equal(log_path.estimate, got.estimate)


def test_iptw_gps_underflow():
    ds = generate_scenario("A", 200, 0)
    gps = GpsModel(intercept=0.0, coefficients=np.zeros(6), residual_sd=0.01)
    md = fit_marginal_density(ds)
    with pytest.raises(GpsUnderflow):
        iptw_qerf(ds, gps, md, [0.0], 0.5, h=1.0)
    curve = iptw_qerf(ds, gps, md, [0.0], 0.5, h=1.0, gps_floor=None)
    assert np.isfinite(curve.estimate).all()


def test_iptw_auto_bandwidth():
    ds = generate_scenario("A", 300, 1)
    c = iptw_qerf(ds, fit_linear_gps(ds), fit_marginal_density(ds), np.linspace(-3, 3, 4), 0.5)
    assert c.kind == "iptw" and np.isfinite(c.estimate).all()


def test_ab_rmse_definitions():
    err = np.array([[1.0, -2.0], [3.0, 0.0]])
    ab, rmse = ab_rmse(err)
    assert ab == pytest.approx((2.0 + 1.0) / 2)
    assert rmse == pytest.approx(np.sqrt((1 + 4 + 9 + 0) / 4))
    single = np.array([[0.5, -1.5, 2.0]])
    ab1, rmse1 = ab_rmse(single)
    assert ab1 <= rmse1
    for e in single[0]:
        assert ab_rmse([[e]])[0] == ab_rmse([[e]])[1] == abs(e)


def test_evaluation_grid():
    ds = ObservationalDataset(exposure=np.arange(1.0, 101.0), covariates=np.zeros((100, 1)))
    g = evaluation_grid(ds)
    assert g.size == 50 and g[0] == 5.0 and g[-1] == 95.0


def test_oracle_estimator_scores_zero():
    res = run_benchmark(["A"], [200], reps=2, seed=1, estimators=["oracle"], R=10_000)
    for row in res.rows:
        assert row.ab == 0.0 and row.rmse == 0.0 and row.reps == 2
    assert {r.target for r in res.rows} == {"qerf", "qee"}
    assert [r.tau for r in res.select(target="qerf")] == ["0.1", "0.5", "0.9", "Average"]


def _noisy_oracle(ctx):
    rng = np.random.default_rng(int(ctx.ds.exposure[0] * 1e6) % 2**32)
    return ctx.truth + rng.standard_normal(ctx.truth.shape)


def test_single_rep_metric_identity_and_seed_consistency():
    one = run_benchmark(["A"], [200], reps=1, seed=3, estimators={"noisy": _noisy_oracle}, R=10_000)
    err = one.errors[("A", 200, "noisy")]
    assert np.all(np.abs(err.mean(axis=0)) <= np.sqrt((err**2).mean(axis=0)))
    for r in one.rows:
        assert r.ab <= r.rmse + 1e-15
    three = run_benchmark(["A"], [200], reps=3, seed=3, estimators={"noisy": _noisy_oracle}, R=10_000)
    np.testing.assert_array_equal(three.errors[("A", 200, "noisy")][:1], err)
    a = rep_seed(3, "A", 200, 0).generate_state(2)
    assert np.array_equal(a, rep_seed(3, "A", 200, 0).generate_state(2))


def test_benchmark_worker_independence():
    kw = dict(scenarios=["A"], ns=[200], reps=2, seed=9, estimators={"noisy": _noisy_oracle}, R=10_000)
    a = run_benchmark(**kw, n_jobs=1)
    b = run_benchmark(**kw, n_jobs=2)
    np.testing.assert_array_equal(a.errors[("A", 200, "noisy")], b.errors[("A", 200, "noisy")])


def test_benchmark_drops_and_failures():
    def fails_on_low_exposure(ctx):
        if ctx.ds.exposure[0] < 0:
            raise GpsUnderflow("forced")
        return ctx.truth

    with pytest.raises(ReplicateFailure):
        run_benchmark(["A"], [200], reps=6, seed=0, estimators={"x": fails_on_low_exposure}, R=10_000)
    with pytest.raises(ValidationError):
        run_benchmark(["A"], [200], reps=0)
    with pytest.raises(ValidationError):
        run_benchmark(["A"], [200], reps=1, estimators=["box-cox"])


def test_real_estimators_run_and_render(tmp_path):
    res = run_benchmark(["B"], [300], reps=1, seed=2, R=10_000,
                        delta_grid=[0.5, 1.0], scale_grid=[0.6, 1.0])
    assert {r.estimator for r in res.rows} == {"matching", "matching-s", "iptw"}
    text = res.render()
    assert text.startswith("Scenario B, N=300, reps=1") and "QEE" in text
    res.to_csv(tmp_path / "b.csv")
    assert (tmp_path / "b.csv").read_text().splitlines()[0] == "scenario,n,estimator,target,tau,ab,rmse,reps"
    assert res.value("B", 300, "iptw", tau=0.5, metric="ab") >= 0
    assert isinstance(res, BenchmarkResult)
