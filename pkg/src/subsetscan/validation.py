"""Input checks for the estimator front end."""

import numpy as np
from sklearn.utils import check_array

from .exceptions import ConfigError


def check_point_data(X, y, observed=None):
    """Validate covariates and responses; NaN responses mark missing records."""
    X = check_array(X, dtype=float, ensure_2d=False)
    if X.ndim == 1:
        X = X[:, None]
    y = check_array(y, dtype=float, ensure_2d=False, ensure_all_finite="allow-nan").ravel()
    if y.size != X.shape[0]:
        raise ConfigError(f"X has {X.shape[0]} rows but y has {y.size} entries")
    if observed is None:
        observed = np.isfinite(y)
    else:
        observed = np.asarray(observed, dtype=bool).ravel()
        if observed.size != y.size:
            raise ConfigError("observed mask must match y in length")
        if not np.all(np.isfinite(y[observed])):
            raise ConfigError("y must be finite where observed")
    if not observed.any():
        raise ConfigError("at least one observed response is required")
    return X, y, observed


def check_case_data(X, y=None, arities=None):
    """Integer value codes (n_records x n_attributes) with nonnegative counts."""
    X = check_array(X, dtype=None, ensure_min_samples=1)
    if not np.issubdtype(X.dtype, np.integer):
        if not np.all(X == np.round(X)):
            raise ConfigError("attribute codes must be integers")
        X = X.astype(np.int64)
    if np.any(X < 0):
        raise ConfigError("attribute codes must be nonnegative")
    if y is None:
        y = np.ones(X.shape[0], dtype=np.int64)
    else:
        y = check_array(y, dtype=None, ensure_2d=False).ravel()
        if y.size != X.shape[0]:
            raise ConfigError("y must have one count per record")
        if np.any(y < 0) or np.any(y != np.round(y)):
            raise ConfigError("counts must be nonnegative integers")
        y = y.astype(np.int64)
    if arities is None:
        arities = tuple(int(v) + 1 for v in X.max(axis=0))
    else:
        arities = tuple(int(a) for a in arities)
        if len(arities) != X.shape[1]:
            raise ConfigError("one arity per attribute column is required")
    return X, y, arities


def check_random_seed(random_state):
    """Integer seed (the package seeds numpy Generators, not RandomState objects)."""
    if random_state is None:
        return 0
    if isinstance(random_state, (int, np.integer)) and random_state >= 0:
        return int(random_state)
    raise ConfigError("random_state must be a nonnegative int or None")
