import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from qerf.dataset import ObservationalDataset
from qerf.exceptions import DegenerateResidual, DegenerateSample, DimensionMismatch, RankDeficientDesign
from qerf.gps import (
    GpsModel,
    LinearGPS,
    MarginalDensity,
    evaluate_gps,
    evaluate_marginal,
    fit_linear_gps,
    fit_marginal_density,
    silverman_bandwidth,
)
from qerf.simbench import generate_scenario


def test_constant_exposure_is_degenerate():
    C = np.random.default_rng(0).standard_normal((20, 2))
    with pytest.raises(DegenerateResidual):
        fit_linear_gps(ObservationalDataset(exposure=np.full(20, 5.0), covariates=C))


def test_exact_fit_is_degenerate():
    c = np.linspace(-1, 1, 15)
    with pytest.raises(DegenerateResidual):
        fit_linear_gps(ObservationalDataset(exposure=2 * c, covariates=c[:, None]))


def test_rank_deficient_design():
    rng = np.random.default_rng(1)
    c = rng.standard_normal(30)
    with pytest.raises(RankDeficientDesign):
        fit_linear_gps(ObservationalDataset(exposure=rng.standard_normal(30), covariates=np.c_[c, 2 * c]))
    with pytest.raises(RankDeficientDesign):
        fit_linear_gps(ObservationalDataset(exposure=[1.0, 2.0, 4.0], covariates=rng.standard_normal((3, 2))))


def test_scenario_a_recovers_exposure_model():
    ds = generate_scenario("A", 5000, 3)
    m = fit_linear_gps(ds)
    X = np.c_[np.ones(ds.n_units), ds.covariates]
    se = m.residual_sd * np.sqrt(np.diag(np.linalg.inv(X.T @ X)))
    truth = np.r_[-0.8, 0.1, 0.1, -0.1, 0.2, 0.1, 0.1]
    est = np.r_[m.intercept, m.coefficients]
    assert np.all(np.abs(est - truth) <= 3 * se)
    assert abs(m.residual_sd - 5.0) < 0.2


def test_weighted_fit_matches_row_replication():
    rng = np.random.default_rng(2)
    C = rng.standard_normal((25, 2))
    w = C @ [1.0, -0.5] + rng.standard_normal(25)
    k = rng.integers(1, 4, 25)
    a = fit_linear_gps(ObservationalDataset(exposure=w, covariates=C, unit_weight=k.astype(float)))
    b = fit_linear_gps(ObservationalDataset(exposure=np.repeat(w, k), covariates=np.repeat(C, k, axis=0)))
    np.testing.assert_allclose([a.intercept, *a.coefficients, a.residual_sd],
                               [b.intercept, *b.coefficients, b.residual_sd], rtol=1e-10)


def test_evaluate_gps_examples():
    m = GpsModel(intercept=0.0, coefficients=np.zeros(1), residual_sd=1.0)
    assert evaluate_gps(m, 0.0, [0.0]) == pytest.approx(0.3989423, abs=1e-7)
    assert evaluate_gps(m, 1.96, [3.0]) == pytest.approx(0.05844, abs=1e-5)
    m2 = GpsModel(intercept=0.0, coefficients=np.zeros(1), residual_sd=2.0)
    assert evaluate_gps(m2, 0.0, [0.0]) == pytest.approx(0.1994711, abs=1e-7)
    with pytest.raises(DimensionMismatch):
        evaluate_gps(m, 0.0, [0.0, 1.0])


@given(st.floats(-5, 5), st.floats(0.1, 10), st.floats(-3, 3))
def test_gps_density_positive_and_normalised(intercept, sd, c):
    m = GpsModel(intercept=intercept, coefficients=np.array([0.7]), residual_sd=sd)
    mean = intercept + 0.7 * c
    total, _ = integrate.quad(lambda w: evaluate_gps(m, w, [c]), mean - 8 * sd, mean + 8 * sd)
    assert abs(total - 1.0) < 1e-6
    assert evaluate_gps(m, mean + 30 * sd, [c]) > 0
    np.testing.assert_allclose(np.exp(m.log_density(np.array([mean + sd]), np.array([[c]]))),
                               m.density(np.array([mean + sd]), np.array([[c]])))


def test_gps_round_trip(tmp_path):
    m = GpsModel(intercept=-0.8, coefficients=np.array([0.1, 1 / 3]), residual_sd=4.9)
    m.save(tmp_path / "gps.json")
    back = GpsModel.load(tmp_path / "gps.json")
    assert back.intercept == m.intercept and back.residual_sd == m.residual_sd
    np.testing.assert_array_equal(back.coefficients, m.coefficients)


def test_linear_gps_estimator_api():
    rng = np.random.default_rng(4)
    X = rng.standard_normal((40, 3))
    w = X @ [1, 2, 3] + rng.standard_normal(40)
    est = LinearGPS().fit(X, w)
    assert est.predict(X).shape == (40,)
    assert np.all(est.density(X, w) > 0)


def test_marginal_density_examples():
    with pytest.raises(DegenerateSample):
        silverman_bandwidth(np.array([0.0]))
    with pytest.raises(DegenerateSample):
        fit_marginal_density(ObservationalDataset(exposure=[1.0, 1.0], covariates=[[0.0], [1.0]]))
    x = np.random.default_rng(6).standard_normal(10_000)
    md = fit_marginal_density(ObservationalDataset(exposure=x, covariates=np.zeros((x.size, 1))))
    assert 0.36 <= evaluate_marginal(md, 0.0) <= 0.44
    assert evaluate_marginal(md, x.max() + 10 * x.std()) < 1e-4


def test_silverman_rule_value():
    x = np.arange(10.0)
    sd = x.std(ddof=1)
    iqr = np.subtract(*np.percentile(x, [75, 25]))
    assert silverman_bandwidth(x) == pytest.approx(0.9 * min(sd, iqr / 1.34) * 10 ** -0.2, rel=0.02)


@given(st.lists(st.integers(-500, 500), min_size=2, max_size=30, unique=True))
def test_marginal_density_nonnegative_and_normalised(values):
    x = np.asarray(values) / 10.0
    md = MarginalDensity(sample=x, weights=np.ones_like(x), bandwidth=silverman_bandwidth(x))
    lo, hi = x.min() - 10 * md.bandwidth, x.max() + 10 * md.bandwidth
    pts = np.sort(np.r_[x, np.linspace(lo, hi, 50)])
    total = sum(integrate.quad(lambda t: float(md(t)[0]), a, b)[0] for a, b in zip(pts[:-1], pts[1:]))
    assert abs(total - 1.0) < 1e-3
    assert np.all(md(np.linspace(lo, hi, 200)) >= 0)
