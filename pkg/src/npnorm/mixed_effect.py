"""Voxelwise fixed effects, bootstrap context functions and a linear baseline."""
import json
import os
import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_design, check_volume_batch
from .tensorcore import Rng, lstsq
from .tensorcore.io import load_tensor, save_tensor

MAX_REDRAWS = 100


class RankDeficiencyWarning(UserWarning):
    pass


def fit_fixed_effect(X, Y, return_info=False):
    """Per-voxel OLS of ``Y`` (N, T1, T2, T3) on design ``X`` (N, D).

    All voxels share the design, so one pivoted-QR factorization solves
    every voxel column. Returns the coefficient tensor (D, T1, T2, T3).
    """
    X = check_design(X)
    Y = check_volume_batch(Y, n=X.shape[0])
    n, d = X.shape
    if n < d:
        raise ValueError(f"need at least as many subjects as covariates, got N={n} < D={d}")
    res = lstsq(X, Y.reshape(n, -1))
    coef = res.coef.reshape((d,) + Y.shape[1:])
    if not np.all(np.isfinite(coef)):
        raise FloatingPointError("non-finite fixed-effect coefficients")
    if return_info:
        return coef, res
    return coef


def predict_fixed_effect(A, X):
    """``X x_1 A``: entry (n, i, j, k) = sum_d X[n, d] * A[d, i, j, k]."""
    X = check_design(X)
    A = np.asarray(A, dtype=np.float64)
    if A.ndim < 2 or A.shape[0] != X.shape[1]:
        raise ValueError(f"design has D={X.shape[1]} columns but coefficients have shape {A.shape}")
    return (X @ A.reshape(A.shape[0], -1)).reshape((X.shape[0],) + A.shape[1:])


def residuals(Y, Yhat):
    Y = np.asarray(Y, dtype=np.float64)
    Yhat = np.asarray(Yhat, dtype=np.float64)
    if Y.shape != Yhat.shape:
        raise ValueError(f"residual shape mismatch: {Y.shape} vs {Yhat.shape}")
    return Y - Yhat


@dataclass
class FixedEffectSet:
    """M bootstrap fixed-effect fits, the functions behind the context set."""

    coefs: np.ndarray  # (M, D, T1, T2, T3)
    indices: list  # M arrays of training-row indices
    seed: int = 0
    stream: int = 0
    split_id: str = ""
    redraws: list = field(default_factory=list)

    @property
    def n_channels(self):
        return self.coefs.shape[0]

    @property
    def n_covariates(self):
        return self.coefs.shape[1]

    def restrict(self, m):
        """First ``m`` channels."""
        return FixedEffectSet(self.coefs[:m].copy(), [i.copy() for i in self.indices[:m]],
                              self.seed, self.stream, self.split_id, list(self.redraws[:m]))

    def save(self, path):
        os.makedirs(path, exist_ok=True)
        meta = {
            "M": self.n_channels,
            "seed": int(self.seed),
            "stream": int(self.stream),
            "split_id": self.split_id,
            "indices": [[int(v) for v in idx] for idx in self.indices],
            "redraws": [int(r) for r in self.redraws],
        }
        with open(os.path.join(path, "meta.json"), "w") as fh:
            json.dump(meta, fh, indent=1, sort_keys=True)
        for m in range(self.n_channels):
            save_tensor(os.path.join(path, f"A_{m:03d}.npnt"), self.coefs[m])

    @classmethod
    def load(cls, path):
        with open(os.path.join(path, "meta.json")) as fh:
            meta = json.load(fh)
        coefs = np.stack([load_tensor(os.path.join(path, f"A_{m:03d}.npnt")) for m in range(meta["M"])])
        return cls(coefs, [np.asarray(i, dtype=np.int64) for i in meta["indices"]],
                   meta["seed"], meta["stream"], meta["split_id"], meta.get("redraws", []))


def build_context_set(X, Y, M, rng, split_id=""):
    """Fit ``M`` fixed effects on bootstrap resamples of the training set.

    Channel ``m`` draws from its own stream ``rng.child("context", m)``, so
    the first channels do not change when ``M`` grows. A resample whose
    design is rank deficient is redrawn (up to 100 times).
    """
    X = check_design(X)
    Y = check_volume_batch(Y, n=X.shape[0])
    if M < 1:
        raise ValueError(f"M must be >= 1, got {M}")
    n, d = X.shape
    if n < d:
        raise ValueError(f"training set of {n} subjects cannot identify {d} covariates")
    coefs, indices, redraws = [], [], []
    for m in range(M):
        for attempt in range(MAX_REDRAWS):
            idx = rng.child("context", m, attempt).integers(n, n)
            coef, info = fit_fixed_effect(X[idx], Y[idx], return_info=True)
            if not info.rank_deficient:
                break
        else:
            raise RuntimeError(f"context channel {m}: {MAX_REDRAWS} bootstrap resamples were all rank deficient")
        coefs.append(coef)
        indices.append(idx)
        redraws.append(attempt)
    return FixedEffectSet(np.stack(coefs), indices, rng.seed, rng.stream, split_id, redraws)


def context_functions(F, X):
    """Evaluate every context function at covariates ``X``: (N, M, T1, T2, T3)."""
    if F.n_channels == 0:
        raise ValueError("empty fixed-effect set")
    X = check_design(X)
    if X.shape[1] != F.n_covariates:
        raise ValueError(f"design has D={X.shape[1]} columns, context functions expect {F.n_covariates}")
    m, d = F.coefs.shape[:2]
    grid = F.coefs.shape[2:]
    flat = F.coefs.reshape(m, d, -1)
    out = np.einsum("nd,mdt->nmt", X, flat)
    return out.reshape((X.shape[0], m) + grid)


def with_intercept(X):
    X = np.asarray(X, dtype=np.float64)
    return np.hstack([np.ones((X.shape[0], 1)), X])


class BayesianLinearNormative(BaseEstimator):
    """Mass-univariate Bayesian linear normative model (flat prior).

    Per voxel the predictive mean is the OLS fit and the predictive
    variance is ``s2 * (1 + x*' (X'X)^-1 x*)`` with ``s2`` the unbiased
    residual variance.
    """

    def __init__(self, fit_intercept=True, ridge=1e-6):
        self.fit_intercept = fit_intercept
        self.ridge = ridge

    def _design(self, X):
        X = check_design(X)
        return with_intercept(X) if self.fit_intercept else X

    def fit(self, X, Y):
        Xd = self._design(X)
        Y = check_volume_batch(Y, n=Xd.shape[0], min_ndim=2)
        n, d = Xd.shape
        if n <= d:
            raise ValueError(f"baseline needs more than D={d} training subjects for a residual variance, got {n}")
        self.grid_shape_ = Y.shape[1:]
        Yf = Y.reshape(n, -1)
        coef, info = fit_fixed_effect(Xd, Y, return_info=True)
        self.coef_ = coef.reshape(d, -1)
        gram = Xd.T @ Xd
        self.singular_ = bool(info.rank_deficient)
        if self.singular_:
            warnings.warn("singular X'X in baseline; using ridge fallback", RankDeficiencyWarning)
            gram = gram + self.ridge * np.eye(d)
            self.coef_ = np.linalg.solve(gram, Xd.T @ Yf)
        self.gram_inv_ = np.linalg.inv(gram)
        resid = Yf - Xd @ self.coef_
        self.noise_var_ = np.sum(resid * resid, axis=0) / (n - d)
        return self

    def predict(self, X, return_var=False):
        Xd = self._design(X)
        mean = (Xd @ self.coef_).reshape((Xd.shape[0],) + self.grid_shape_)
        if not return_var:
            return mean
        leverage = np.einsum("nd,de,ne->n", Xd, self.gram_inv_, Xd)
        var = (1.0 + leverage)[:, None] * self.noise_var_[None, :]
        return mean, var.reshape(mean.shape)


def baseline_blr_normative(X_train, Y_train, X_test, fit_intercept=False):
    """Functional form of :class:`BayesianLinearNormative`.

    Returns ``(mean, var, singular)`` for the test subjects.
    """
    model = BayesianLinearNormative(fit_intercept=fit_intercept).fit(X_train, Y_train)
    mean, var = model.predict(X_test, return_var=True)
    return mean, var, model.singular_
