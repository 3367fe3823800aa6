"""Synthetic cohorts with planted ground truth, persistence and splits.

The response model is ``Y = X x_1 A + Z + E + deviations``:

* ``X``: standard-normal covariates with a shared factor (equicorrelation
  ``covariate_correlation``), so the first principal component is well
  defined, as it is for questionnaire subscales.
* ``A``: smooth coefficient volumes (Gaussian-blurred white noise).
* ``Z``: per-subject random effect, a rank-limited mixture of smooth
  spatial fields.
* ``E``: Gaussian noise.
* deviations: inside each patient group's mask, an offset of
  ``offset * noise_std * (1 + coupling * s)`` with ``s`` the subject's
  standardized PC1 score.
"""
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .normative import first_principal_component
from .tensorcore import Rng
from .tensorcore.io import load_tensor, save_tensor

HEALTHY = "healthy"
DESK_GRID = (8, 10, 6)
PAPER_GRID = (49, 61, 40)


@dataclass
class DeviationSpec:
    offset: float = 3.0  # in noise-std units
    coupling: float = 0.4  # per standardized PC1 unit
    region: int = -1  # index into the region layout; -1 picks a default


@dataclass
class CohortSpec:
    n_healthy: int = 60
    n_per_group: tuple = (10, 10, 10)
    group_names: tuple = ("group1", "group2", "group3")
    n_covariates: int = 11
    grid: tuple = DESK_GRID
    fixed_effect_scale: float = 3.0
    covariate_correlation: float = 0.5
    correlation_length: float = 1.5
    random_effect_std: float = 0.1
    random_effect_rank: int = 4
    noise_std: float = 1.0
    deviation_fraction: float = 0.05
    n_regions: int = 9
    deviations: list = field(default_factory=lambda: [DeviationSpec() for _ in range(3)])
    seed: int = 0

    def validate(self):
        counts = [self.n_healthy, *self.n_per_group]
        if any(int(c) < 0 for c in counts):
            raise ValueError(f"subject counts must be >= 0, got {counts}")
        if len(self.n_per_group) != len(self.group_names):
            raise ValueError("n_per_group and group_names differ in length")
        if len(self.deviations) != len(self.group_names):
            raise ValueError("need one deviation spec per patient group")
        if len(self.grid) != 3 or any(int(t) < 1 for t in self.grid):
            raise ValueError(f"grid extents must be >= 1, got {self.grid}")
        if self.noise_std < 0:
            raise ValueError(f"noise_std must be >= 0, got {self.noise_std}")
        if self.n_covariates < 1:
            raise ValueError("need at least one covariate")
        if not 0 <= self.covariate_correlation < 1:
            raise ValueError("covariate_correlation must be in [0, 1)")
        if not 0 < self.deviation_fraction <= 1:
            raise ValueError("deviation_fraction must be in (0, 1]")
        if self.n_regions < len(self.group_names):
            raise ValueError("need at least one region per patient group")
        for dev in self.deviations:
            if dev.region >= self.n_regions:
                raise ValueError(f"deviation region {dev.region} outside the {self.n_regions}-region layout")

    @property
    def n_subjects(self):
        return self.n_healthy + sum(self.n_per_group)

    def to_dict(self):
        d = asdict(self)
        d["grid"] = list(self.grid)
        d["n_per_group"] = list(self.n_per_group)
        d["group_names"] = list(self.group_names)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["deviations"] = [DeviationSpec(**dev) for dev in d.get("deviations", [])]
        for key in ("grid", "n_per_group", "group_names"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class Cohort:
    X: np.ndarray
    Y: np.ndarray
    labels: np.ndarray
    spec: CohortSpec
    truth: dict = field(default_factory=dict)
    covariate_names: list = None

    def __post_init__(self):
        n = self.X.shape[0]
        if self.Y.shape[0] != n or len(self.labels) != n:
            raise ValueError(
                f"row counts disagree: X {self.X.shape[0]}, Y {self.Y.shape[0]}, labels {len(self.labels)}")
        if self.covariate_names is None:
            self.covariate_names = [f"x{d}" for d in range(self.X.shape[1])]

    @property
    def n_subjects(self):
        return self.X.shape[0]

    @property
    def grid(self):
        return self.Y.shape[1:]

    @property
    def region_masks(self):
        return self.truth.get("region_masks", {})

    def subset(self, idx):
        idx = np.asarray(idx)
        truth = dict(self.truth)
        if "pc1_scores" in truth:
            truth["pc1_scores"] = np.asarray(truth["pc1_scores"])[idx]
        return Cohort(self.X[idx], self.Y[idx], self.labels[idx], self.spec, truth, list(self.covariate_names))

    def save(self, path):
        save_cohort(self, path)


def region_layout(grid, n_regions, fraction):
    """Disjoint compact voxel sets, one per block of a near-square tiling.

    The grid is tiled into ``a x b`` blocks across the first two axes and
    each region takes the ``ceil(fraction * T)`` voxels of its block closest
    to the block centre (ties broken by flat voxel index).
    """
    grid = tuple(int(t) for t in grid)
    total = int(np.prod(grid))
    size = max(1, int(np.ceil(fraction * total)))
    a = int(np.ceil(np.sqrt(n_regions)))
    b = int(np.ceil(n_regions / a))
    coords = np.stack(np.unravel_index(np.arange(total), grid), axis=1).astype(np.float64)
    bi = np.minimum((coords[:, 0] * a // grid[0]).astype(int), a - 1)
    bj = np.minimum((coords[:, 1] * b // grid[1]).astype(int), b - 1)
    regions = []
    for r in range(n_regions):
        i, j = divmod(r, b)
        members = np.flatnonzero((bi == i) & (bj == j))
        if members.size < size:
            raise ValueError(f"grid {grid} too small for {n_regions} regions of {size} voxels")
        centre = np.array([(i + 0.5) * grid[0] / a, (j + 0.5) * grid[1] / b, grid[2] / 2.0]) - 0.5
        dist = np.sum((coords[members] - centre) ** 2, axis=1)
        order = np.lexsort((members, dist))
        regions.append(np.sort(members[order[:size]]))
    return regions


def _default_regions(n_groups, n_regions):
    # spread planted regions across the tiling
    return [int(round(g * (n_regions - 1) / max(n_groups - 1, 1))) for g in range(n_groups)] if n_groups > 1 else [0]


def _smooth_fields(rng, count, grid, length):
    raw = rng.normal((count,) + tuple(grid))
    fields = np.stack([gaussian_filter(f, sigma=length, mode="wrap") if length > 0 else f for f in raw])
    fields -= fields.reshape(count, -1).mean(axis=1)[:, None, None, None]
    std = fields.reshape(count, -1).std(axis=1)
    std[std == 0] = 1.0
    return fields / std[:, None, None, None]


def generate(spec=None):
    """Draw a cohort from ``spec`` (defaults to the desk-scale benchmark)."""
    spec = spec or CohortSpec()
    spec.validate()
    rng = Rng(spec.seed).child("cohort")
    grid = tuple(int(t) for t in spec.grid)
    d = spec.n_covariates
    labels = np.array([HEALTHY] * spec.n_healthy
                      + [name for name, k in zip(spec.group_names, spec.n_per_group) for _ in range(k)],
                      dtype=object)
    n = labels.size

    rho = spec.covariate_correlation
    factor = rng.child("x-factor").normal((n, 1))
    unique = rng.child("x-unique").normal((n, d))
    X = np.sqrt(rho) * factor + np.sqrt(1.0 - rho) * unique

    A = _smooth_fields(rng.child("A"), d, grid, spec.correlation_length) * (spec.fixed_effect_scale / np.sqrt(d))
    fixed = (X @ A.reshape(d, -1)).reshape((n,) + grid)

    r = max(int(spec.random_effect_rank), 1)
    basis = _smooth_fields(rng.child("Z-basis"), r, grid, spec.correlation_length)
    weights = rng.child("Z-weights").normal((n, r)) / np.sqrt(r)
    Z = spec.random_effect_std * (weights @ basis.reshape(r, -1)).reshape((n,) + grid)
    E = spec.noise_std * rng.child("E").normal((n,) + grid)

    regions = region_layout(grid, spec.n_regions, spec.deviation_fraction)
    if n >= 2 and np.ptp(X, axis=0).max() > 0:
        _, scores = first_principal_component(X)
        sd = scores.std()
        scores = scores / sd if sd > 0 else scores
    else:
        scores = np.zeros(n)

    defaults = _default_regions(len(spec.group_names), spec.n_regions)
    deviation_masks = {}
    dev = np.zeros((n, int(np.prod(grid))))
    for g, (name, dspec) in enumerate(zip(spec.group_names, spec.deviations)):
        region = dspec.region if dspec.region >= 0 else defaults[g]
        mask = regions[region]
        deviation_masks[name] = mask
        rows = np.flatnonzero(labels == name)
        if rows.size and dspec.offset != 0:
            amp = dspec.offset * spec.noise_std * (1.0 + dspec.coupling * scores[rows])
            dev[np.ix_(rows, mask)] += amp[:, None]
    Y = fixed + Z + E + dev.reshape((n,) + grid)

    truth = {
        "A_true": A,
        "deviation_masks": deviation_masks,
        "region_masks": {f"region{k}": regions[k] for k in range(len(regions))},
        "pc1_scores": scores,
    }
    return Cohort(X, Y, labels, spec, truth, [f"x{k}" for k in range(d)])


# ---------------------------------------------------------------- splitting

DESK_PROTOCOL = {"healthy": 45, "group1": 3, "group2": 3, "group3": 3}
PAPER_PROTOCOL = {"healthy": 75, "group1": 5, "group2": 5, "group3": 5}


@dataclass
class SplitProtocol:
    train_counts: dict
    seed: int = 0


def split(cohort, protocol):
    """Sample ``protocol.train_counts[label]`` subjects of each label into training.

    ``cohort`` may be a :class:`Cohort` or a label array. Returns sorted
    (train indices, test indices).
    """
    labels = np.asarray(cohort.labels if isinstance(cohort, Cohort) else cohort)
    rng = Rng(protocol.seed).child("split")
    train = []
    for label, count in sorted(protocol.train_counts.items()):
        rows = np.flatnonzero(labels == label)
        if count < 0 or count > rows.size:
            raise ValueError(f"protocol asks for {count} '{label}' subjects, only {rows.size} available")
        train.append(rows[rng.child(label).permutation(rows.size)[:count]])
    train = np.sort(np.concatenate(train)) if train else np.array([], dtype=np.int64)
    test = np.setdiff1d(np.arange(labels.size), train)
    return train.astype(np.int64), test.astype(np.int64)


# ---------------------------------------------------------------- persistence

def save_cohort(cohort, path):
    os.makedirs(os.path.join(path, "truth"), exist_ok=True)
    meta = {
        "spec": cohort.spec.to_dict(),
        "labels": [str(v) for v in cohort.labels],
        "seed": int(cohort.spec.seed),
        "covariate_names": list(cohort.covariate_names),
    }
    with open(os.path.join(path, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
    save_tensor(os.path.join(path, "X.npnt"), cohort.X)
    save_tensor(os.path.join(path, "Y.npnt"), cohort.Y)
    truth = cohort.truth
    if "A_true" in truth:
        save_tensor(os.path.join(path, "truth", "A_true.npnt"), truth["A_true"])
    masks = {
        "deviation": {k: [int(v) for v in idx] for k, idx in truth.get("deviation_masks", {}).items()},
        "regions": {k: [int(v) for v in idx] for k, idx in truth.get("region_masks", {}).items()},
    }
    with open(os.path.join(path, "truth", "masks.json"), "w") as fh:
        json.dump(masks, fh, indent=1, sort_keys=True)
    if "pc1_scores" in truth:
        save_tensor(os.path.join(path, "truth", "pc1_scores.npnt"), truth["pc1_scores"])


def load_cohort(path):
    meta_path = os.path.join(path, "meta.json")
    if not os.path.isfile(meta_path):
        raise FileNotFoundError(f"no cohort at {path!r} (missing meta.json)")
    with open(meta_path) as fh:
        meta = json.load(fh)
    X = load_tensor(os.path.join(path, "X.npnt"))
    Y = load_tensor(os.path.join(path, "Y.npnt"))
    truth = {}
    tdir = os.path.join(path, "truth")
    if os.path.isfile(os.path.join(tdir, "A_true.npnt")):
        truth["A_true"] = load_tensor(os.path.join(tdir, "A_true.npnt"))
    if os.path.isfile(os.path.join(tdir, "masks.json")):
        with open(os.path.join(tdir, "masks.json")) as fh:
            masks = json.load(fh)
        truth["deviation_masks"] = {k: np.asarray(v, dtype=np.int64) for k, v in masks["deviation"].items()}
        truth["region_masks"] = {k: np.asarray(v, dtype=np.int64) for k, v in masks["regions"].items()}
    if os.path.isfile(os.path.join(tdir, "pc1_scores.npnt")):
        truth["pc1_scores"] = load_tensor(os.path.join(tdir, "pc1_scores.npnt"))
    labels = np.array(meta["labels"], dtype=object)
    return Cohort(X, Y, labels, CohortSpec.from_dict(meta["spec"]), truth, meta["covariate_names"])
