"""Input checks shared by the estimators."""

import numpy as np
from sklearn.utils.validation import check_array, check_consistent_length

from .exceptions import ValidationError


def check_covariates_exposure(X, w):
    X = check_array(X, dtype=np.float64, ensure_min_features=0, ensure_min_samples=2)
    w = check_array(w, dtype=np.float64, ensure_2d=False, ensure_min_samples=2)
    if w.ndim != 1:
        raise ValidationError("exposure must be one-dimensional")
    check_consistent_length(X, w)
    return X, w


def check_vector(x, name, min_samples=1):
    x = check_array(x, dtype=np.float64, ensure_2d=False, ensure_min_samples=min_samples, input_name=name)
    if x.ndim != 1:
        raise ValidationError(f"{name} must be one-dimensional")
    return x


def check_weights(weights, n, name="sample_weight", allow_zero=False):
    if weights is None:
        return np.ones(n)
    w = check_vector(weights, name)
    if w.shape[0] != n:
        raise ValidationError(f"{name} has length {w.shape[0]}, expected {n}")
    if np.any(w < 0) or (not allow_zero and np.any(w == 0)):
        raise ValidationError(f"{name} must be {'non-negative' if allow_zero else 'positive'}")
    return w


def check_tau(tau):
    tau = float(tau)
    if not 0.0 < tau < 1.0:
        raise ValidationError(f"tau must lie in (0, 1), got {tau}")
    return tau
