"""Neural-process mixed-effect model: objective, training, prediction, persistence."""
import csv
import io
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .._validation import check_design, check_volume_batch
from ..mixed_effect import FixedEffectSet, context_functions, with_intercept
from ..tensorcore import AdamState, Rng, adam_step, backward, geometric_schedule
from ..tensorcore import autograd as ag
from ..tensorcore.io import load_tensor, save_tensor
from .network import NpArchitecture, decoder_forward, encoder_forward, init_network
from .quantile import QuantileTransform

LOG_2PI = float(np.log(2.0 * np.pi))
DEFAULT_SAMPLE_BUDGET = 4096


class TrainingError(FloatingPointError):
    """Non-finite loss during training."""


@dataclass
class LatentGaussian:
    mean: np.ndarray  # (N, Q)
    std: np.ndarray  # (N, Q), > 0

    def __post_init__(self):
        if self.mean.shape != self.std.shape:
            raise ValueError(f"mean {self.mean.shape} and std {self.std.shape} differ in shape")
        if np.any(np.asarray(getattr(self.std, "data", self.std)) <= 0):
            raise ValueError("latent std must be strictly positive")


@dataclass
class Schedule:
    epochs: int = 100
    lr_start: float = 1e-2
    lr_end: float = 1e-5
    batch_size: int = 8
    n_mc: int = 1

    def validate(self):
        geometric_schedule(self.lr_start, self.lr_end, self.epochs)
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch normalization)")
        if self.n_mc < 1:
            raise ValueError("n_mc must be >= 1")


@dataclass
class NpModel:
    arch: NpArchitecture
    params: dict
    state: dict
    quantile: QuantileTransform = None
    context: FixedEffectSet = None
    x_mean: np.ndarray = None
    x_scale: np.ndarray = None
    schedule: Schedule = field(default_factory=Schedule)
    seed: int = 0
    train_log: list = field(default_factory=list)

    def tensors(self, requires_grad=False):
        return {k: ag.Tensor(v, requires_grad=requires_grad, name=k) for k, v in self.params.items()}

    def standardize(self, X):
        X = check_design(X)
        if self.x_mean is None:
            return X
        return (X - self.x_mean) / self.x_scale

    def context_for(self, Xs):
        """Context functions at standardized covariates, channels last."""
        C = context_functions(self.context, with_intercept(Xs))
        return np.moveaxis(C, 1, -1)

    @property
    def noise_var(self):
        return np.maximum(np.exp(self.params["log_noise_var"]), 1e-6)

    # ------------------------------------------------------------ persistence

    def save(self, path):
        os.makedirs(os.path.join(path, "params"), exist_ok=True)
        meta = {
            "arch": self.arch.to_dict(),
            "schedule": self.schedule.__dict__,
            "seed": int(self.seed),
            "x_mean": None if self.x_mean is None else [float(v) for v in self.x_mean],
            "x_scale": None if self.x_scale is None else [float(v) for v in self.x_scale],
            "quantile_eps": None if self.quantile is None else self.quantile.eps,
            "params": sorted(self.params),
            "state": sorted(self.state),
        }
        with open(os.path.join(path, "arch.json"), "w") as fh:
            json.dump(meta, fh, indent=1, sort_keys=True)
        for name, value in self.params.items():
            save_tensor(os.path.join(path, "params", f"{name}.npnt"), value)
        for name, value in self.state.items():
            save_tensor(os.path.join(path, "params", f"state.{name}.npnt"), value)
        if self.quantile is not None:
            save_tensor(os.path.join(path, "quantile.npnt"), self.quantile.reference)
        if self.context is not None:
            self.context.save(os.path.join(path, "context"))
        with open(os.path.join(path, "trainlog.csv"), "w", newline="") as fh:
            fh.write(trainlog_csv(self.train_log))

    @classmethod
    def load(cls, path):
        meta_path = os.path.join(path, "arch.json")
        if not os.path.isfile(meta_path):
            raise FileNotFoundError(f"no model at {path!r} (missing arch.json)")
        with open(meta_path) as fh:
            meta = json.load(fh)
        params = {n: load_tensor(os.path.join(path, "params", f"{n}.npnt")) for n in meta["params"]}
        state = {n: load_tensor(os.path.join(path, "params", f"state.{n}.npnt")) for n in meta["state"]}
        quantile = None
        if meta.get("quantile_eps") is not None:
            quantile = QuantileTransform(load_tensor(os.path.join(path, "quantile.npnt")), meta["quantile_eps"])
        context = None
        if os.path.isdir(os.path.join(path, "context")):
            context = FixedEffectSet.load(os.path.join(path, "context"))
        log = []
        log_path = os.path.join(path, "trainlog.csv")
        if os.path.isfile(log_path):
            with open(log_path, newline="") as fh:
                log = [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()}
                       for row in csv.DictReader(fh)]
        x_mean = None if meta["x_mean"] is None else np.array(meta["x_mean"])
        x_scale = None if meta["x_scale"] is None else np.array(meta["x_scale"])
        return cls(NpArchitecture.from_dict(meta["arch"]), params, state, quantile, context,
                   x_mean, x_scale, Schedule(**meta["schedule"]), meta["seed"], log)


def trainlog_csv(log):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "loss", "recon", "kl", "lr"])
    for row in log:
        writer.writerow([row["epoch"], repr(float(row["loss"])), repr(float(row["recon"])),
                         repr(float(row["kl"])), repr(float(row["lr"]))])
    return buf.getvalue()


def residual_log_variance(Y, Cl):
    """Log mean squared deviation of targets from the context functions, as a grid.

    Pooled over voxels: each voxel starts at the grand residual variance and
    adapts during training, which shrinks the noisy per-voxel estimates.
    """
    resid = Y[..., None] - Cl
    return np.full(Y.shape[1:], np.log(max(float(np.mean(resid * resid)), 1e-6)))


def new_model(arch, rng, **kwargs):
    params, state = init_network(arch, rng.child("init"))
    return NpModel(arch, params, state, **kwargs)


# ---------------------------------------------------------------- spec operations

def _channels_last(C):
    C = np.asarray(C, dtype=np.float64)
    if C.ndim != 5:
        raise ValueError(f"context must be (N, M, T1, T2, T3), got shape {C.shape}")
    return np.moveaxis(C, 1, -1)


def encode(model, X, C, mode="infer", rng=None, mc_dropout=False):
    """Latent distribution ``q(Z | X, C)`` for context ``C`` of shape (N, M, T1, T2, T3)."""
    X = check_design(X)
    Cl = _channels_last(C)
    mean, std = encoder_forward(model.arch, model.tensors(), model.state, X, Cl, mode, rng, mc_dropout)
    return LatentGaussian(mean.numpy(), std.numpy())


def replicate_target(Y, n_channels):
    """Target volumes (N, T1, T2, T3) copied onto every encoder channel."""
    Y = np.asarray(Y, dtype=np.float64)
    return np.repeat(Y[:, None], n_channels, axis=1)


def encode_target(model, X, Y, mode="infer", rng=None, mc_dropout=False):
    """Posterior ``q(Z | X, Y)``: the target replicated across all M channels."""
    Y = check_volume_batch(Y)
    return encode(model, X, replicate_target(Y, model.arch.n_channels), mode, rng, mc_dropout)


def sample_latent(q, rng):
    """Reparameterized draw ``mean + std * u``; ``rng`` may be one stream or one per subject."""
    mean = ag.as_tensor(q.mean)
    std = ag.as_tensor(q.std)
    if isinstance(rng, (list, tuple)):
        u = np.stack([r.normal(mean.shape[1:]) for r in rng])
    else:
        u = rng.normal(mean.shape)
    z = ag.add(mean, ag.mul(std, u))
    return z if isinstance(q.mean, ag.Tensor) else z.numpy()


def decode(model, X, Z, mode="infer", rng=None, mc_dropout=False):
    """Predicted volumes in quantile space and the per-voxel noise variance."""
    X = check_design(X)
    pred, var = decoder_forward(model.arch, model.tensors(), model.state, X, np.asarray(Z, dtype=np.float64),
                                mode, rng, mc_dropout)
    return pred.numpy(), var.numpy()


def kl_diag_gaussian_terms(q_mean, q_std, p_mean, p_std):
    """Per-subject KL(q || p) as a tensor (N,)."""
    ratio = ag.div(q_std, p_std)
    diff = ag.div(ag.sub(q_mean, p_mean), p_std)
    elem = ag.sub(ag.mul(ag.add(ag.square(ratio), ag.square(diff)), 0.5), ag.add(ag.log(ratio), 0.5))
    return ag.sum(elem, axis=1)


def kl_diag_gaussian(q, p):
    """KL(q || p) for diagonal Gaussians: (per-subject array, total)."""
    for g in (q, p):
        if np.any(np.asarray(g.std) <= 0):
            raise ValueError("KL requires strictly positive standard deviations")
    if np.shape(q.mean) != np.shape(p.mean):
        raise ValueError(f"KL shape mismatch: {np.shape(q.mean)} vs {np.shape(p.mean)}")
    per = kl_diag_gaussian_terms(q.mean, q.std, p.mean, p.std).numpy()
    return per, float(per.sum())


def gaussian_loglik_terms(Y, mean, var):
    """Per-subject diagonal Gaussian log-likelihood as a tensor (N,)."""
    Y = ag.as_tensor(Y)
    n = Y.shape[0]
    resid = ag.sub(Y, mean)
    elem = ag.add(ag.add(ag.log(var), LOG_2PI), ag.div(ag.square(resid), var))
    return ag.mul(ag.sum(ag.reshape(elem, (n, -1)), axis=1), -0.5)


def gaussian_loglik(Y, mean, var):
    """Sum over subjects and voxels of ``-0.5 * [log(2 pi var) + (y - mean)^2 / var]``."""
    Y = np.asarray(Y, dtype=np.float64)
    mean = np.broadcast_to(np.asarray(mean, dtype=np.float64), Y.shape)
    var = np.broadcast_to(np.asarray(var, dtype=np.float64), Y.shape)
    if np.any(var <= 0):
        raise ValueError("variance must be strictly positive")
    if Y.ndim == 1:
        Y, mean, var = Y[None], mean[None], var[None]
    return float(gaussian_loglik_terms(Y, mean, var).numpy().sum())


@dataclass
class LossTerms:
    loss: float
    recon: float
    kl: float


def elbo_objective(model, P, X, Y, Cl, rng, n_mc=1, mode="train"):
    """Negative ELBO per subject on tensors.

    Context and replicated target pass through the encoder as one stacked
    batch. Returns (loss tensor, recon tensor, kl tensor), each averaged
    over subjects.
    """
    arch = model.arch
    n = X.shape[0]
    Yrep = np.repeat(Y[..., None], arch.n_channels, axis=-1)
    mean, std = encoder_forward(arch, P, model.state, np.concatenate([X, X]), np.concatenate([Cl, Yrep]),
                                mode, rng.child("encoder"))
    rows_c = (slice(0, n), slice(None))
    rows_t = (slice(n, 2 * n), slice(None))
    mu_c, sd_c = ag.take(mean, rows_c), ag.take(std, rows_c)
    mu_t, sd_t = ag.take(mean, rows_t), ag.take(std, rows_t)
    recon = None
    for s in range(n_mc):
        u = rng.child("latent", s).normal(mu_t.shape)
        z = ag.add(mu_t, ag.mul(sd_t, u))
        pred, var = decoder_forward(arch, P, model.state, X, z, mode, rng.child("decoder", s))
        term = gaussian_loglik_terms(Y, pred, var)
        recon = term if recon is None else ag.add(recon, term)
    recon = ag.mul(recon, 1.0 / n_mc)
    kl = kl_diag_gaussian_terms(mu_t, sd_t, mu_c, sd_c)
    recon_mean = ag.mean(recon)
    kl_mean = ag.mean(kl)
    return ag.sub(kl_mean, recon_mean), recon_mean, kl_mean


def elbo_loss(model, X, Y, C, rng, n_mc=1, mode="train"):
    """Negative ELBO (mean per subject) and its (recon, KL) breakdown.

    ``X`` standardized covariates (N, D), ``Y`` quantile-space targets
    (N, T1, T2, T3), ``C`` context (N, M, T1, T2, T3).
    """
    X = check_design(X)
    Y = check_volume_batch(Y, n=X.shape[0])
    loss, recon, kl = elbo_objective(model, model.tensors(), X, Y, _channels_last(C), rng, n_mc, mode)
    return LossTerms(float(loss.data), float(recon.data), float(kl.data))


# ---------------------------------------------------------------- training

def train(X_train, Y_train, F, arch, schedule, rng, quantile=None, x_mean=None, x_scale=None, callback=None):
    """Fit the NP by ADAM on the negative ELBO with a geometric learning-rate decay.

    ``X_train`` are standardized covariates, ``Y_train`` quantile-space
    targets and ``F`` the bootstrap fixed effects fitted on the same split.
    """
    X = check_design(X_train)
    Y = check_volume_batch(Y_train, n=X.shape[0])
    schedule.validate()
    arch.validate()
    if F.n_channels != arch.n_channels:
        raise ValueError(f"architecture expects {arch.n_channels} context channels, fixed-effect set has {F.n_channels}")
    model = new_model(arch, rng, quantile=quantile, context=F, x_mean=x_mean, x_scale=x_scale,
                      schedule=schedule, seed=rng.seed)
    Cl = model.context_for(X)
    if arch.init_log_noise_var is None:
        model.params["log_noise_var"] = residual_log_variance(Y, Cl)
    lrs = geometric_schedule(schedule.lr_start, schedule.lr_end, schedule.epochs)
    n = X.shape[0]
    n_batches = max(1, int(np.ceil(n / schedule.batch_size)))
    if n // n_batches < 2:
        raise ValueError("training set too small for batch normalization")
    adam = AdamState()
    params = model.params
    for epoch in range(schedule.epochs):
        erng = rng.child("epoch", epoch)
        order = erng.permutation(n)
        sums = np.zeros(3)
        for b, idx in enumerate(np.array_split(order, n_batches)):
            P = {k: ag.Tensor(v, requires_grad=True, name=k) for k, v in params.items()}
            loss, recon, kl = elbo_objective(model, P, X[idx], Y[idx], Cl[idx], erng.child("batch", b),
                                             schedule.n_mc)
            if not (np.isfinite(loss.data) and np.isfinite(recon.data) and np.isfinite(kl.data)):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}: "
                                    f"loss={float(loss.data)}, recon={float(recon.data)}, kl={float(kl.data)}")
            grads = backward(loss, P)
            params = adam_step(adam, params, grads, float(lrs[epoch]))
            model.params = params
            sums += np.array([float(loss.data), float(recon.data), float(kl.data)]) * len(idx)
        sums /= n
        row = {"epoch": epoch, "loss": sums[0], "recon": sums[1], "kl": sums[2], "lr": float(lrs[epoch])}
        model.train_log.append(row)
        if callback is not None:
            callback(row)
    return model


# ---------------------------------------------------------------- prediction

@dataclass
class PredictiveSummary:
    mean: np.ndarray
    epistemic_var: np.ndarray
    aleatoric_var: np.ndarray
    noise_var: np.ndarray
    samples: np.ndarray = None  # (K, L, N, T1, T2, T3) when retained

    @property
    def total_var(self):
        return self.epistemic_var + self.aleatoric_var


def subject_streams(rng, keys):
    return [rng.child("subject", int(k)) for k in keys]


def predict_distribution(model, X_star, F=None, K=10, L=10, rng=None, mc_dropout=True,
                         subject_keys=None, keep_samples=False, budget=DEFAULT_SAMPLE_BUDGET):
    """Predictive mean and epistemic/aleatoric variance for new subjects.

    ``X_star`` are standardized covariates. For each of ``K`` dropout masks
    the test context is encoded and ``L`` latent draws are decoded with the
    mask held fixed. Epistemic variance is the variance of the per-mask
    means; aleatoric variance is the mean within-mask variance plus the
    learned noise variance. Every subject draws from its own stream keyed
    by ``subject_keys`` (default: row index).
    """
    X = check_design(X_star)
    if K < 1 or L < 1:
        raise ValueError(f"K and L must be >= 1, got K={K}, L={L}")
    if K * L > budget:
        raise ValueError(f"K*L = {K * L} exceeds the sample budget {budget}")
    F = F or model.context
    rng = rng or Rng(model.seed).child("predict")
    keys = np.arange(X.shape[0]) if subject_keys is None else np.asarray(subject_keys)
    if keys.shape[0] != X.shape[0]:
        raise ValueError("one subject key per row required")
    Cl = np.moveaxis(context_functions(F, with_intercept(X)), 1, -1)
    P = model.tensors()
    arch = model.arch
    streams = subject_streams(rng, keys)
    mask_means, mask_vars, cube = [], [], []
    noise = None
    for k in range(K):
        mask_rng = [s.child("mask", k) for s in streams]
        mean, std = encoder_forward(arch, P, model.state, X, Cl, "infer", [r.child("enc") for r in mask_rng],
                                    mc_dropout)
        draws = []
        for l in range(L):
            u = np.stack([s.child("latent", k, l).normal(arch.latent_dim) for s in streams])
            z = mean.data + std.data * u
            pred, var = decoder_forward(arch, P, model.state, X, z, "infer",
                                        [r.child("dec") for r in mask_rng], mc_dropout)
            draws.append(pred.data)
            noise = var.data
        draws = np.stack(draws)
        mask_means.append(draws.mean(axis=0))
        mask_vars.append(draws.var(axis=0))
        if keep_samples:
            cube.append(draws)
    mask_means = np.stack(mask_means)
    grand = mask_means.mean(axis=0)
    epistemic = mask_means.var(axis=0)
    aleatoric = np.mean(mask_vars, axis=0) + noise
    return PredictiveSummary(grand, epistemic, aleatoric, np.array(noise),
                             np.stack(cube) if keep_samples else None)
