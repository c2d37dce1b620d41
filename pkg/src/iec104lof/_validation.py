"""Input checks shared by the estimators and the functional API."""

import numbers

import numpy as np
from sklearn.utils import check_array


def check_points(X, name="X", min_samples=1):
    """Return ``X`` as a finite float64 matrix of shape (n_samples, n_features).

    A 1-D input is read as n one-dimensional points.
    """
    if np.ndim(X) == 1:
        X = np.reshape(X, (-1, 1))
    return check_array(X, dtype=np.float64, ensure_all_finite=True,
                       ensure_min_samples=min_samples, input_name=name)


def check_n_neighbors(k, n_samples=None):
    if isinstance(k, bool) or not isinstance(k, numbers.Integral) or k < 1:
        raise ValueError(f"n_neighbors must be a positive integer, got {k!r}")
    if n_samples is not None and n_samples < k + 1:
        raise ValueError(
            f"need at least n_neighbors + 1 = {k + 1} points, got {n_samples}")
    return int(k)


def check_threshold(threshold):
    if isinstance(threshold, str):
        if threshold != "auto":
            raise ValueError(f"threshold must be a number > 1 or 'auto', got {threshold!r}")
        return threshold
    threshold = float(threshold)
    if not threshold > 1.0 or not np.isfinite(threshold):
        raise ValueError(f"threshold must be a finite number > 1, got {threshold}")
    return threshold
