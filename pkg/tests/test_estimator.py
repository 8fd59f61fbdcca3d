from dataclasses import replace

import numpy as np
import pytest
from sklearn.base import clone

from qerf.estimator import MatchingQERF, predict_matched
from qerf.exceptions import ValidationError
from qerf.matching import GPSMatching
from qerf.quantile import adjust_bandwidth, kernel_quantile, qerf_empirical_curve


def test_design_is_outcome_blind(scenario_a_small):
    a = MatchingQERF(delta=1.0, scale=0.4, h_mean=1.0).fit_dataset(scenario_a_small)
    shuffled = replace(scenario_a_small, outcome=scenario_a_small.outcome[::-1].copy())
    b = MatchingQERF(delta=1.0, scale=0.4, h_mean=1.0).fit_dataset(shuffled)
    np.testing.assert_array_equal(a.matched_.match_index, b.matched_.match_index)
    design = GPSMatching(delta=1.0, scale=0.4).fit_dataset(scenario_a_small.without_outcome())
    np.testing.assert_array_equal(a.matched_.match_index, design.matched_.match_index)


def test_predict_shapes_and_values(scenario_a_small):
    est = MatchingQERF(taus=(0.1, 0.9), delta=1.0, scale=0.4, h_mean=1.5).fit_dataset(scenario_a_small)
    grid = np.linspace(-4, 4, 9)
    pred = est.predict(grid)
    assert pred.shape == (9, 2)
    m = est.matched_
    want = kernel_quantile(m.source.exposure, m.source.outcome, m.analysis_weight, grid, 0.9,
                           adjust_bandwidth(1.5, 0.9).h_tau)
    np.testing.assert_array_equal(pred[:, 1], want)
    assert np.all(pred[:, 0] <= pred[:, 1])
    np.testing.assert_allclose(est.qee(grid[1:], grid[:-1]), np.diff(pred, axis=0))
    curves = est.curves(grid)
    assert [c.tau for c in curves] == [0.1, 0.9]


def test_empirical_kind(scenario_a_small):
    est = MatchingQERF(taus=(0.5,), kind="empirical", delta=1.0, scale=0.4).fit_dataset(scenario_a_small)
    pts = np.array([2.0, -1.0, 2.0, 100.0])
    pred = est.predict(pts)[:, 0]
    ref = qerf_empirical_curve(est.matched_, np.array([-1.0, 2.0]), 0.5).estimate
    assert pred[0] == pred[2] == ref[1] and pred[1] == ref[0]
    assert np.isnan(pred[3])
    assert "h_mean" not in est.frozen_params()


def test_frozen_params_reproduce_fit(scenario_a_small):
    est = MatchingQERF(taus=(0.5,), delta_grid=[0.5, 1.0], scale_grid=[0.2, 1.0]).fit_dataset(scenario_a_small)
    frozen = clone(est).set_params(**est.frozen_params()).fit_dataset(scenario_a_small)
    grid = np.linspace(-2, 2, 5)
    np.testing.assert_array_equal(frozen.predict(grid), est.predict(grid))
    assert frozen.design_.aac_grid_ is None


def test_sklearn_style_fit(scenario_a_small):
    ds = scenario_a_small
    a = MatchingQERF(delta=1.0, scale=0.4, h_mean=1.0).fit(ds.covariates, ds.exposure, ds.outcome)
    b = MatchingQERF(delta=1.0, scale=0.4, h_mean=1.0).fit_dataset(ds)
    np.testing.assert_array_equal(a.predict([0.0]), b.predict([0.0]))


def test_validation(scenario_a_small):
    with pytest.raises(ValidationError):
        MatchingQERF().fit_dataset(scenario_a_small.without_outcome())
    with pytest.raises(ValidationError):
        MatchingQERF(kind="mean").fit_dataset(scenario_a_small)
    with pytest.raises(ValidationError):
        MatchingQERF(taus=(1.5,)).fit_dataset(scenario_a_small)
    m = MatchingQERF(delta=1.0, scale=0.4, h_mean=1.0).fit_dataset(scenario_a_small).matched_
    with pytest.raises(ValidationError):
        predict_matched(m, [0.0], (0.5,), "smoothed", None)
