"""Per-voxel empirical quantile transform onto [eps, 1 - eps]."""
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .._validation import check_volume_batch

DEFAULT_EPS = 1e-3


@dataclass
class QuantileTransform:
    """Sorted training values per voxel, shape (n_train, *grid)."""

    reference: np.ndarray
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        if not 0 < self.eps < 0.5:
            raise ValueError(f"clip eps must be in (0, 0.5), got {self.eps}")

    @property
    def grid_shape(self):
        return self.reference.shape[1:]

    @property
    def constant_voxels(self):
        ref = self.reference.reshape(self.reference.shape[0], -1)
        return ref[0] == ref[-1]

    def _tables(self, v):
        """Distinct training values of voxel ``v`` and their mean plotting positions."""
        col = self.reference.reshape(self.reference.shape[0], -1)[:, v]
        n = col.size
        values, inverse = np.unique(col, return_inverse=True)
        positions = (np.arange(1, n + 1) - 0.5) / n
        pos = np.bincount(inverse, weights=positions) / np.bincount(inverse)
        return values, pos


def quantile_fit(Y_train, eps=DEFAULT_EPS):
    Y = check_volume_batch(Y_train, name="Y_train")
    if Y.shape[0] < 1:
        raise ValueError("quantile transform needs training data")
    return QuantileTransform(np.sort(Y, axis=0), eps)


def quantile_apply(t, Y):
    """Interpolated empirical CDF position per voxel, clipped to [eps, 1 - eps].

    Values below the training minimum map to ``eps`` and above the maximum
    to ``1 - eps``; voxels with fewer than two distinct training values map
    to 0.5.
    """
    Y = check_volume_batch(Y, min_ndim=1)
    if Y.shape[1:] != t.grid_shape:
        raise ValueError(f"grid {Y.shape[1:]} does not match transform grid {t.grid_shape}")
    flat = Y.reshape(Y.shape[0], -1)
    out = np.empty_like(flat)
    lo, hi = t.eps, 1.0 - t.eps
    for v in range(flat.shape[1]):
        values, pos = t._tables(v)
        if values.size < 2:
            out[:, v] = 0.5
            continue
        out[:, v] = np.interp(flat[:, v], values, pos, left=lo, right=hi)
    return np.clip(out, lo, hi).reshape(Y.shape)


def quantile_invert(t, U):
    """Interpolated empirical quantile function (inverse of :func:`quantile_apply`)."""
    U = check_volume_batch(U, min_ndim=1, name="U")
    if U.shape[1:] != t.grid_shape:
        raise ValueError(f"grid {U.shape[1:]} does not match transform grid {t.grid_shape}")
    flat = U.reshape(U.shape[0], -1)
    out = np.empty_like(flat)
    for v in range(flat.shape[1]):
        values, pos = t._tables(v)
        if values.size < 2:
            out[:, v] = values[0]
            continue
        out[:, v] = np.interp(flat[:, v], pos, values)
    return out.reshape(U.shape)


class VoxelQuantileTransformer(TransformerMixin, BaseEstimator):
    """Estimator wrapper around the per-voxel quantile transform."""

    def __init__(self, eps=DEFAULT_EPS):
        self.eps = eps

    def fit(self, Y, y=None):
        self.transform_ = quantile_fit(Y, self.eps)
        return self

    def transform(self, Y):
        return quantile_apply(self.transform_, Y)

    def inverse_transform(self, U):
        return quantile_invert(self.transform_, U)
