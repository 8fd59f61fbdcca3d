"""Hand-built matched datasets for unit tests."""

import numpy as np

from qerf.dataset import ObservationalDataset
from qerf.matching import ExposureBins, MatchConfig, MatchedDataset


def matched_with_counts(exposure, outcome, counts, delta=1.0, scale=1.0, gps=None, covariates=None):
    """MatchedDataset whose replacement counts equal ``counts``.

    Templates are laid out over ``max(counts)`` dummy levels, so ``K_j``
    is exact while the level structure is irrelevant to the caller.
    """
    exposure = np.asarray(exposure, float)
    n = exposure.size
    counts = np.asarray(counts, int)
    if covariates is None:
        covariates = np.zeros((n, 1))
    ds = ObservationalDataset(exposure=exposure, covariates=covariates, outcome=np.asarray(outcome, float))
    slots = np.repeat(np.arange(n), counts)
    n_levels = max(1, -(-slots.size // n))
    mi = np.full(n_levels * n, -1, dtype=np.int64)
    mi[: slots.size] = slots
    bins = ExposureBins(np.full(n_levels, exposure.mean()), float(delta))
    gps_obs = np.arange(n, dtype=float) if gps is None else np.asarray(gps, float)
    return MatchedDataset(bins, mi.reshape(n_levels, n), MatchConfig(delta, scale), ds, gps_obs)
