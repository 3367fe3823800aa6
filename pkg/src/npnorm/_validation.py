import numpy as np


def check_finite(arr, name="array"):
    arr = np.asarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")
    return arr


def check_design(X, name="X"):
    """2-D finite float64 design matrix."""
    X = check_finite(X, name)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise ValueError(f"{name} must be 2-D (subjects x covariates), got shape {X.shape}")
    return X


def check_volume_batch(Y, n=None, min_ndim=2, name="Y"):
    """Finite float64 array whose first axis indexes subjects."""
    Y = check_finite(Y, name)
    if Y.ndim < min_ndim:
        raise ValueError(f"{name} must have at least {min_ndim} axes, got shape {Y.shape}")
    if n is not None and Y.shape[0] != n:
        raise ValueError(f"{name} has {Y.shape[0]} subjects, expected {n}")
    return Y


def check_labels(labels, n=None):
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ValueError(f"labels must be 1-D, got shape {labels.shape}")
    if n is not None and labels.shape[0] != n:
        raise ValueError(f"got {labels.shape[0]} labels for {n} subjects")
    return labels
