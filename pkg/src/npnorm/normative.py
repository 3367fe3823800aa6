"""Normative probability maps, extreme-value novelty scores and region analysis."""
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import optimize, stats
from sklearn.base import BaseEstimator

from ._validation import check_design, check_finite, check_labels

VAR_FLOOR = 1e-6
EULER_GAMMA = 0.5772156649015329
GUMBEL_EPS = 1e-9
MIN_GEVD_SAMPLES = 20


def compute_npm(Y, mean, var=None):
    """Standardized deviation ``(Y - mean) / sqrt(var)``.

    ``mean`` may also be a predictive summary exposing ``mean`` and
    ``total_var``.
    """
    if var is None:
        mean, var = mean.mean, mean.total_var
    Y = check_finite(Y, "Y")
    mean = np.asarray(mean, dtype=np.float64)
    var = np.asarray(var, dtype=np.float64)
    if Y.shape != mean.shape or np.broadcast_shapes(Y.shape, var.shape) != Y.shape:
        raise ValueError(f"shape mismatch: Y {Y.shape}, mean {mean.shape}, var {var.shape}")
    if np.any(var < VAR_FLOOR):
        raise ValueError(f"predictive variance below floor {VAR_FLOOR}: min {var.min():.3g}")
    return (Y - mean) / np.sqrt(var)


def summary_statistic(npm, top_fraction=0.01, mode="absolute", block="mean"):
    """Block-maximum summary of one subject's NPM volume.

    Mean (``block="mean"``) or maximum (``block="max"``) of the
    ``ceil(top_fraction * T)`` largest values, where values are ``|npm|``
    for ``mode="absolute"`` and raw for ``mode="signed"``. Ties are broken
    by voxel index.
    """
    values = np.ravel(check_finite(npm, "npm"))
    if values.size == 0:
        raise ValueError("empty NPM volume")
    if not 0 < top_fraction <= 1:
        raise ValueError(f"top_fraction must be in (0, 1], got {top_fraction}")
    if mode == "absolute":
        values = np.abs(values)
    elif mode != "signed":
        raise ValueError(f"mode must be 'absolute' or 'signed', got {mode!r}")
    k = max(1, int(np.ceil(top_fraction * values.size - 1e-9)))
    top = values[np.argsort(-values, kind="stable")[:k]]
    if block == "mean":
        return float(top.mean())
    if block == "max":
        return float(top[0])
    raise ValueError(f"block must be 'mean' or 'max', got {block!r}")


def summary_statistics(npms, **kwargs):
    npms = np.asarray(npms)
    return np.array([summary_statistic(v, **kwargs) for v in npms])


# ---------------------------------------------------------------- GEVD

@dataclass
class GevdParams:
    mu: float
    sigma: float
    xi: float
    converged: bool = True
    gumbel_fallback: bool = False

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"GEVD scale must be > 0, got {self.sigma}")

    def to_dict(self):
        return {"mu": self.mu, "sigma": self.sigma, "xi": self.xi,
                "converged": self.converged, "gumbel_fallback": self.gumbel_fallback}


def gevd_cdf(a, params):
    """GEVD cumulative distribution; Gumbel branch for ``|xi| < 1e-9``."""
    a = np.asarray(a, dtype=np.float64)
    mu, sigma, xi = params.mu, params.sigma, params.xi
    y = (a - mu) / sigma
    if abs(xi) < GUMBEL_EPS:
        out = np.exp(-np.exp(-y))
    else:
        t = 1.0 + xi * y
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            inner = np.exp(-np.log1p(xi * y) / xi)
            out = np.exp(-inner)
        below = 0.0 if xi > 0 else 1.0  # outside the support
        out = np.where(t > 0, out, below)
    return out if out.ndim else float(out)


def gevd_loglik(samples, mu, sigma, xi):
    a = np.asarray(samples, dtype=np.float64)
    if not sigma > 0:
        return -np.inf
    y = (a - mu) / sigma
    n = a.size
    if abs(xi) < GUMBEL_EPS:
        return float(-n * np.log(sigma) - np.sum(y) - np.sum(np.exp(-y)))
    t = 1.0 + xi * y
    if np.any(t <= 0):
        return -np.inf
    logt = np.log1p(xi * y)
    return float(-n * np.log(sigma) - (1.0 + 1.0 / xi) * np.sum(logt) - np.sum(np.exp(-logt / xi)))


def _moment_start(a):
    sigma0 = np.std(a, ddof=1) * np.sqrt(6.0) / np.pi
    mu0 = np.mean(a) - EULER_GAMMA * sigma0
    return mu0, sigma0, 0.1


def fit_gevd(samples, max_iter=20000):
    """Maximum-likelihood GEVD fit by Nelder-Mead on (mu, log sigma, xi).

    Starts from the Gumbel moment estimates with ``xi = 0.1``. Points
    outside the support get a large penalty. If the simplex fails to
    converge or leaves the sanity range ``|xi| < 5``, a Gumbel (``xi = 0``)
    fit is returned instead.
    """
    a = check_finite(samples, "samples").ravel()
    if a.size < MIN_GEVD_SAMPLES:
        raise ValueError(f"GEVD fit needs >= {MIN_GEVD_SAMPLES} samples, got {a.size}")
    if np.ptp(a) == 0:
        raise ValueError("GEVD fit needs samples that are not all equal")
    mu0, sigma0, xi0 = _moment_start(a)
    if not np.isfinite(gevd_loglik(a, mu0, sigma0, xi0)):
        xi0 = 0.0
    start_ll = gevd_loglik(a, mu0, sigma0, xi0)
    penalty = 1e10 + abs(start_ll)

    def nll(theta):
        ll = gevd_loglik(a, theta[0], np.exp(theta[1]), theta[2])
        return -ll if np.isfinite(ll) else penalty

    res = optimize.minimize(nll, np.array([mu0, np.log(sigma0), xi0]), method="Nelder-Mead",
                            options={"xatol": 1e-9, "fatol": 1e-10, "maxiter": max_iter, "maxfev": 2 * max_iter})
    mu, sigma, xi = res.x[0], float(np.exp(res.x[1])), float(res.x[2])
    if res.success and abs(xi) < 5 and np.isfinite(res.fun) and res.fun < penalty:
        params = GevdParams(float(mu), sigma, xi, converged=True)
    else:
        params = _fit_gumbel(a, mu0, sigma0, max_iter)
    if gevd_loglik(a, params.mu, params.sigma, params.xi) < start_ll:
        params = GevdParams(float(mu0), float(sigma0), float(xi0), converged=params.converged,
                            gumbel_fallback=params.gumbel_fallback)
    return params


def _fit_gumbel(a, mu0, sigma0, max_iter):
    res = optimize.minimize(lambda th: -gevd_loglik(a, th[0], np.exp(th[1]), 0.0),
                            np.array([mu0, np.log(sigma0)]), method="Nelder-Mead",
                            options={"xatol": 1e-9, "fatol": 1e-10, "maxiter": max_iter})
    return GevdParams(float(res.x[0]), float(np.exp(res.x[1])), 0.0, converged=bool(res.success),
                      gumbel_fallback=True)


@dataclass
class NoveltyScores:
    summary: np.ndarray
    probability: np.ndarray
    labels: np.ndarray
    params: GevdParams


def abnormality_probabilities(train_summaries, test_summaries, labels=None):
    """Fit a GEVD to training summaries and score test summaries by its CDF."""
    params = fit_gevd(train_summaries)
    test = check_finite(test_summaries, "test summaries").ravel()
    prob = np.clip(np.asarray(gevd_cdf(test, params), dtype=np.float64).reshape(test.shape), 0.0, 1.0)
    labels = np.asarray(labels) if labels is not None else np.array([None] * test.size, dtype=object)
    return NoveltyScores(test, prob, labels, params)


class NoveltyDetector(BaseEstimator):
    """GEVD novelty scoring of NPM volumes (fit on reference subjects)."""

    def __init__(self, top_fraction=0.01, mode="absolute", block="mean"):
        self.top_fraction = top_fraction
        self.mode = mode
        self.block = block

    def summarize(self, npms):
        return summary_statistics(npms, top_fraction=self.top_fraction, mode=self.mode, block=self.block)

    def fit(self, npms, y=None):
        self.reference_summaries_ = self.summarize(npms)
        self.params_ = fit_gevd(self.reference_summaries_)
        return self

    def predict_proba(self, npms):
        return np.clip(np.atleast_1d(gevd_cdf(self.summarize(npms), self.params_)), 0.0, 1.0)


# ---------------------------------------------------------------- evaluation

def auc(scores, labels):
    """Mann-Whitney AUC: P(positive outscores negative), ties count 1/2."""
    scores = check_finite(scores, "scores").ravel()
    labels = check_labels(labels, scores.size).astype(int)
    if not np.all(np.isin(labels, (0, 1))):
        raise ValueError("labels must be 0/1")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc needs both classes present")
    ranks = stats.rankdata(scores)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def first_principal_component(X, tol=1e-10, max_iter=10_000):
    """Leading principal axis of ``X`` by power iteration.

    Returns ``(component, scores)``: a unit D-vector whose largest-magnitude
    entry is positive, and the centred data projected on it.
    """
    X = check_design(X)
    if X.shape[0] < 2:
        raise ValueError("need at least 2 subjects for a principal component")
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / (X.shape[0] - 1)
    if not np.any(np.diag(cov) > 0):
        raise ValueError("covariates have zero variance")
    v = cov[:, int(np.argmax(np.diag(cov)))].copy()
    v /= np.linalg.norm(v)
    for _ in range(max_iter):
        w = cov @ v
        w /= np.linalg.norm(w)
        if np.dot(w, v) < 0:
            w = -w
        done = np.linalg.norm(w - v) < tol
        v = w
        if done:
            break
    else:
        warnings.warn("power iteration did not reach tolerance", RuntimeWarning)
    if v[np.argmax(np.abs(v))] < 0:
        v = -v
    return v, Xc @ v


@dataclass
class RegionResult:
    region: str
    r2: float
    f_stat: float
    p_value: float
    p_bonferroni: float
    significant: bool
    n: int


def _simple_r2(x, y):
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = np.dot(xc, xc)
    syy = np.dot(yc, yc)
    if sxx == 0 or syy == 0:
        return 0.0
    return float(np.dot(xc, yc) ** 2 / (sxx * syy))


def region_association(npm, masks, X, alpha=0.05, scores=None):
    """Association of mean regional NPM with the first principal component of ``X``.

    ``masks`` maps region names to flat voxel indices (a list is named by
    position). Each region's per-subject mean NPM is regressed on the PC1
    scores; significance uses F(1, n-2) with a Bonferroni factor equal to
    the number of regions. Precomputed PC1 ``scores`` (e.g. from the whole
    cohort's covariates) take precedence over ``X``.
    """
    npm = check_finite(npm, "npm")
    X = check_design(X)
    n = npm.shape[0]
    if scores is not None:
        scores = check_finite(scores, "scores").ravel()
        if scores.size != n:
            raise ValueError(f"NPM has {n} subjects, scores has {scores.size}")
    elif X.shape[0] != n:
        raise ValueError(f"NPM has {n} subjects, X has {X.shape[0]}")
    if n < 3:
        raise ValueError("region association needs at least 3 subjects")
    if not isinstance(masks, dict):
        masks = {f"region{k}": m for k, m in enumerate(masks)}
    flat = npm.reshape(n, -1)
    if scores is None:
        _, scores = first_principal_component(X)
    factor = len(masks)
    out = []
    for name, idx in masks.items():
        idx = np.asarray(idx, dtype=np.int64).ravel()
        if idx.size == 0:
            raise ValueError(f"region {name!r} is empty")
        if idx.min() < 0 or idx.max() >= flat.shape[1]:
            raise ValueError(f"region {name!r} references voxels outside [0, {flat.shape[1]})")
        means = flat[:, idx].mean(axis=1)
        r2 = _simple_r2(scores, means)
        if r2 >= 1.0:
            f_stat, p = np.inf, 0.0
        else:
            f_stat = r2 * (n - 2) / (1.0 - r2)
            p = float(stats.f.sf(f_stat, 1, n - 2))
        p_adj = min(1.0, p * factor)
        out.append(RegionResult(str(name), r2, float(f_stat), p, p_adj, bool(p_adj < alpha), n))
    return out


def group_difference_maps(npm, labels, healthy="healthy", groups=None):
    """Per patient group: mean NPM over the group minus mean over healthy."""
    npm = check_finite(npm, "npm")
    labels = check_labels(labels, npm.shape[0])
    if not np.any(labels == healthy):
        raise ValueError(f"no '{healthy}' subjects to compare against")
    base = npm[labels == healthy].mean(axis=0)
    if groups is None:
        groups = sorted({str(v) for v in labels if v != healthy})
    maps = {}
    for group in groups:
        rows = labels == group
        if not np.any(rows):
            warnings.warn(f"group {group!r} is empty; skipped", RuntimeWarning)
            continue
        maps[group] = npm[rows].mean(axis=0) - base
    return maps
