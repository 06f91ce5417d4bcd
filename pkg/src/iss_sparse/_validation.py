"""Small input-checking helpers shared by the solvers."""

import numpy as np


def check_matrix(X, name="X"):
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError(f"{name} must be 2-dimensional, got shape {X.shape}")
    if X.shape[0] < 1 or X.shape[1] < 1:
        raise ValueError(f"{name} must have at least one row and one column")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains NaN or Inf")
    return X


def check_vector(v, name="y", length=None):
    v = np.asarray(v, dtype=float)
    if v.ndim == 2 and 1 in v.shape:
        v = v.ravel()
    if v.ndim != 1:
        raise ValueError(f"{name} must be 1-dimensional, got shape {v.shape}")
    if length is not None and v.shape[0] != length:
        raise ValueError(f"{name} has length {v.shape[0]}, expected {length}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} contains NaN or Inf")
    return v


def check_index_set(indices, p, name="support"):
    """Return a sorted, duplicate-free int array of indices in [0, p)."""
    idx = np.unique(np.asarray(list(indices) if not isinstance(indices, np.ndarray)
                               else indices, dtype=int))
    if idx.size and (idx[0] < 0 or idx[-1] >= p):
        raise ValueError(f"{name} has indices outside [0, {p})")
    return idx


def check_positive(value, name, allow_zero=False, allow_inf=False):
    value = float(value)
    if np.isnan(value) or (np.isinf(value) and not allow_inf):
        raise ValueError(f"{name} must be finite, got {value}")
    if value < 0 or (value == 0 and not allow_zero):
        bound = ">= 0" if allow_zero else "> 0"
        raise ValueError(f"{name} must be {bound}, got {value}")
    return value
