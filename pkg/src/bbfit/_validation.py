"""Input validation helpers shared by the estimator-style classes."""

import numbers

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import DimensionError


def check_2d(X, n_features=None, allow_empty=False):
    """Finite float64 2-D array, optionally with a fixed number of columns."""
    X = check_array(X, dtype=np.float64, ensure_2d=True, ensure_all_finite=True,
                    ensure_min_samples=0 if allow_empty else 1)
    if n_features is not None and X.shape[1] != n_features:
        raise DimensionError(f"expected {n_features} feature(s), got {X.shape[1]}")
    return X


def check_1d(y, n=None, name="y"):
    """Finite float64 vector of optional length ``n``."""
    y = np.asarray(y, dtype=float)
    if y.ndim == 2 and 1 in y.shape:
        y = y.ravel()
    if y.ndim != 1:
        raise DimensionError(f"{name} must be one-dimensional, got shape {y.shape}")
    if not np.all(np.isfinite(y)):
        raise ValueError(f"{name} contains NaN or infinite values")
    if n is not None and y.shape[0] != n:
        raise DimensionError(f"{name} has {y.shape[0]} entries, expected {n}")
    return y


def check_same_length(*arrays):
    lengths = {len(a) for a in arrays}
    if len(lengths) > 1:
        raise DimensionError(f"length mismatch: {sorted(lengths)}")


def check_scalar_in(value, name, lo=-np.inf, hi=np.inf, integer=False, lo_open=False):
    """Validate a scalar hyperparameter and return it."""
    kind = numbers.Integral if integer else numbers.Real
    if isinstance(value, bool) or not isinstance(value, kind):
        raise TypeError(f"{name} must be {'an integer' if integer else 'a real number'}, got {value!r}")
    if (value <= lo if lo_open else value < lo) or value > hi:
        raise ValueError(f"{name}={value} outside [{lo}, {hi}]")
    return value


def check_random_state(seed):
    """numpy Generator from None, an int, or an existing Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
