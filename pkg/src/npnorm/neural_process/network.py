"""Encoder/decoder networks of the neural-process normative model.

Encoder ``h(X, C)``: a 3-D CNN stack (conv -> batchnorm -> avgpool ->
leaky ReLU per block) reads the M context channels, a dense layer maps the
flattened features to ``R_Y``, which is concatenated with the covariates
and passed through two dense layers to ``R``; two heads give the latent
mean and std (softplus + 1e-6 floor).

Decoder ``g(X, Z)``: dense layers on ``[X, Z]`` produce a coarse feature
grid, transposed convolutions (kernel 2, stride 2) upsample it, the result
is cropped to the voxel grid and a final convolution + sigmoid gives the
prediction in (0, 1). The noise variance is ``exp(log_noise_var)``
per voxel, floored at 1e-6.
"""
from dataclasses import asdict, dataclass

import numpy as np

from ..tensorcore import autograd as ag
from ..tensorcore import layers as L

STD_FLOOR = 1e-6
NOISE_FLOOR = 1e-6


@dataclass
class NpArchitecture:
    grid: tuple = (8, 10, 6)
    n_channels: int = 20
    n_covariates: int = 11
    conv_channels: tuple = (8, 16, 32)
    kernel_size: int = 3
    pool_size: int = 2
    feature_width: int = 32
    joint_widths: tuple = (32, 32)
    latent_dim: int = 16
    decoder_widths: tuple = (32,)
    decoder_channels: tuple = (16, 8)
    dropout: float = 0.1
    init_log_noise_var: float = None  # None: set from the training data

    def validate(self):
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.n_channels < 1:
            raise ValueError("need at least one context channel")
        if len(self.grid) != 3 or min(self.grid) < 1:
            raise ValueError(f"grid must have three positive extents, got {self.grid}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd (same padding)")
        self.encoder_shapes()

    def pool_kernels(self):
        """Per-block pooling kernels, clamped so no axis collapses to zero."""
        shape = tuple(self.grid)
        kernels = []
        for _ in self.conv_channels:
            k = tuple(min(self.pool_size, t) for t in shape)
            kernels.append(k)
            shape = tuple(t // kk for t, kk in zip(shape, k))
        return kernels

    def encoder_shapes(self):
        shape = tuple(self.grid)
        shapes = [shape]
        for k in self.pool_kernels():
            shape = tuple(t // kk for t, kk in zip(shape, k))
            shapes.append(shape)
        return shapes

    def decoder_base(self):
        f = 2 ** len(self.decoder_channels)
        return tuple(int(np.ceil(t / f)) for t in self.grid)

    def to_dict(self):
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("grid", "conv_channels", "joint_widths", "decoder_widths", "decoder_channels"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def init_network(arch, rng):
    """Fan-in uniform weights, zero biases, unit batchnorm. Returns (params, state)."""
    arch.validate()
    params, state = {}, {}
    k = (arch.kernel_size,) * 3
    c_in = arch.n_channels
    for i, c_out in enumerate(arch.conv_channels):
        for key, val in L.init_conv(rng.child("enc.conv", i), k, c_in, c_out).items():
            params[f"enc.conv{i}.{key}"] = val
        p, s = L.init_batchnorm(c_out)
        params.update({f"enc.bn{i}.{key}": v for key, v in p.items()})
        state.update({f"enc.bn{i}.{key}": v for key, v in s.items()})
        c_in = c_out
    flat = c_in * int(np.prod(arch.encoder_shapes()[-1]))

    def dense(name, n_in, n_out):
        for key, val in L.init_dense(rng.child(name), n_in, n_out).items():
            params[f"{name}.{key}"] = val

    dense("enc.feat", flat, arch.feature_width)
    width = arch.feature_width + arch.n_covariates
    for i, w in enumerate(arch.joint_widths):
        dense(f"enc.fc{i}", width, w)
        width = w
    dense("enc.mu", width, arch.latent_dim)
    dense("enc.sigma", width, arch.latent_dim)

    width = arch.n_covariates + arch.latent_dim
    for i, w in enumerate(arch.decoder_widths):
        dense(f"dec.fc{i}", width, w)
        width = w
    base = arch.decoder_base()
    c0 = arch.conv_channels[-1]
    dense("dec.grid", width, c0 * int(np.prod(base)))
    c_in = c0
    for i, c_out in enumerate(arch.decoder_channels):
        for key, val in L.init_conv(rng.child("dec.tconv", i), (2, 2, 2), c_in, c_out).items():
            params[f"dec.tconv{i}.{key}"] = val
        p, s = L.init_batchnorm(c_out)
        params.update({f"dec.bn{i}.{key}": v for key, v in p.items()})
        state.update({f"dec.bn{i}.{key}": v for key, v in s.items()})
        c_in = c_out
    for key, val in L.init_conv(rng.child("dec.out"), k, c_in, 1).items():
        params[f"dec.out.{key}"] = val
    init = 0.0 if arch.init_log_noise_var is None else float(arch.init_log_noise_var)
    params["log_noise_var"] = np.full(tuple(arch.grid), init)
    return params, state


def _sub(params, prefix):
    n = len(prefix) + 1
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix + ".")}


def _child(rng, name):
    if rng is None:
        return None
    if isinstance(rng, (list, tuple)):
        return [r.child(name) for r in rng]
    return rng.child(name)


def _dropout(x, arch, mode, rng, mc_dropout, name):
    active = mode == "train" or mc_dropout
    if not active or arch.dropout == 0.0:
        return x
    r = _child(rng, name)
    if isinstance(r, list):
        mask = np.stack([ri.keep_mask(x.shape[1:], arch.dropout) for ri in r]) / (1.0 - arch.dropout)
        return ag.mul(x, mask)
    return L.dropout(x, arch.dropout, mode, r, mc_dropout)


def encoder_forward(arch, P, state, X, C, mode="infer", rng=None, mc_dropout=False):
    """``h(X, C)`` on tensors. ``C`` is channels-last (N, T1, T2, T3, M).

    Returns (mean, std) tensors of shape (N, Q).
    """
    C = ag.as_tensor(C)
    X = ag.as_tensor(X)
    if C.ndim != 5 or C.shape[-1] != arch.n_channels:
        raise ValueError(f"encoder expects {arch.n_channels} context channels on axis -1, got shape {C.shape}")
    if tuple(C.shape[1:4]) != tuple(arch.grid):
        raise ValueError(f"context grid {C.shape[1:4]} != model grid {tuple(arch.grid)}")
    if X.shape[1] != arch.n_covariates or X.shape[0] != C.shape[0]:
        raise ValueError(f"covariates shape {X.shape} incompatible with context {C.shape}")
    h = C
    pad = arch.kernel_size // 2
    for i, pk in enumerate(arch.pool_kernels()):
        h = ag.conv3d(h, P[f"enc.conv{i}.weight"], P[f"enc.conv{i}.bias"], padding=pad)
        h = L.batchnorm3d(h, _sub(P, f"enc.bn{i}"), _bn_state(state, f"enc.bn{i}"), mode)
        h = ag.avg_pool3d(h, pk)
        h = ag.leaky_relu(h, L.LEAKY_SLOPE)
    h = ag.reshape(h, (h.shape[0], -1))
    r_y = ag.leaky_relu(L.dense(h, _sub(P, "enc.feat")), L.LEAKY_SLOPE)
    r = ag.concat([r_y, X], axis=1)
    for i in range(len(arch.joint_widths)):
        r = ag.leaky_relu(L.dense(r, _sub(P, f"enc.fc{i}")), L.LEAKY_SLOPE)
        r = _dropout(r, arch, mode, rng, mc_dropout, f"enc.drop{i}")
    mean = L.dense(r, _sub(P, "enc.mu"))
    std = ag.add(ag.softplus(L.dense(r, _sub(P, "enc.sigma"))), STD_FLOOR)
    return mean, std


def decoder_forward(arch, P, state, X, Z, mode="infer", rng=None, mc_dropout=False):
    """``g(X, Z)`` on tensors. Returns (prediction (N, T1, T2, T3), noise variance (T1, T2, T3))."""
    X, Z = ag.as_tensor(X), ag.as_tensor(Z)
    if X.shape[0] != Z.shape[0] or X.shape[1] != arch.n_covariates or Z.shape[1] != arch.latent_dim:
        raise ValueError(f"decoder inputs X {X.shape} / Z {Z.shape} do not match architecture "
                         f"(D={arch.n_covariates}, Q={arch.latent_dim})")
    n = X.shape[0]
    h = ag.concat([X, Z], axis=1)
    for i in range(len(arch.decoder_widths)):
        h = ag.leaky_relu(L.dense(h, _sub(P, f"dec.fc{i}")), L.LEAKY_SLOPE)
        h = _dropout(h, arch, mode, rng, mc_dropout, f"dec.drop{i}")
    h = ag.leaky_relu(L.dense(h, _sub(P, "dec.grid")), L.LEAKY_SLOPE)
    base = arch.decoder_base()
    h = ag.reshape(h, (n,) + base + (arch.conv_channels[-1],))
    for i in range(len(arch.decoder_channels)):
        h = ag.conv_transpose3d(h, P[f"dec.tconv{i}.weight"], P[f"dec.tconv{i}.bias"], stride=2)
        h = L.batchnorm3d(h, _sub(P, f"dec.bn{i}"), _bn_state(state, f"dec.bn{i}"), mode)
        h = ag.leaky_relu(h, L.LEAKY_SLOPE)
    t1, t2, t3 = arch.grid
    if h.shape[1:4] != (t1, t2, t3):
        h = ag.take(h, (slice(None), slice(0, t1), slice(0, t2), slice(0, t3), slice(None)))
    h = ag.conv3d(h, P["dec.out.weight"], P["dec.out.bias"], padding=arch.kernel_size // 2)
    pred = ag.sigmoid(ag.reshape(h, (n, t1, t2, t3)))
    var = ag.clamp_min(ag.exp(P["log_noise_var"]), NOISE_FLOOR)
    return pred, var


def _bn_state(state, prefix):
    """View onto the running statistics of one batchnorm layer that writes back."""
    return _StateView(state, prefix) if state is not None else None


class _StateView(dict):
    def __init__(self, state, prefix):
        super().__init__({"running_mean": state[f"{prefix}.running_mean"],
                          "running_var": state[f"{prefix}.running_var"]})
        self._state = state
        self._prefix = prefix

    def __setitem__(self, key, value):
        super().__setitem__(key, value)
        self._state[f"{self._prefix}.{key}"] = value
