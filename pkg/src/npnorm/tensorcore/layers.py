"""Layer set used by the neural-process encoder and decoder.

Shape arithmetic (channels last, per spatial axis):

* ``conv3d``: ``(T + 2*padding - k) // stride + 1``
* ``conv_transpose3d``: ``(T - 1) * stride + k``
* ``avgpool3d``: ``T // k`` (floor; trailing voxels are dropped)

Every layer takes ``mode`` in {"train", "infer"}. Dropout is identity in
infer mode unless ``mc_dropout=True``; batchnorm in infer mode uses the
stored running statistics.
"""
import numpy as np

from . import autograd as ag

LEAKY_SLOPE = 0.01
BN_MOMENTUM = 0.1
BN_EPS = 1e-5

KINDS = ("dense", "conv3d", "conv_transpose3d", "avgpool3d", "batchnorm3d",
         "leaky_relu", "dropout", "softplus", "sigmoid")


def init_dense(rng, n_in, n_out):
    bound = 1.0 / np.sqrt(n_in)
    return {
        "weight": rng.generator().uniform(-bound, bound, size=(n_in, n_out)),
        "bias": np.zeros(n_out),
    }


def init_conv(rng, kernel, c_in, c_out):
    kernel = tuple(kernel)
    fan_in = c_in * int(np.prod(kernel))
    bound = 1.0 / np.sqrt(fan_in)
    return {
        "weight": rng.generator().uniform(-bound, bound, size=kernel + (c_in, c_out)),
        "bias": np.zeros(c_out),
    }


def init_batchnorm(channels):
    params = {"gamma": np.ones(channels), "beta": np.zeros(channels)}
    state = {"running_mean": np.zeros(channels), "running_var": np.ones(channels)}
    return params, state


def dense(x, params):
    w, b = params["weight"], params["bias"]
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"dense: input features {x.shape[-1]} (axis -1) != weight rows {w.shape[0]}")
    return ag.matmul(x, w) + b


def dropout(x, rate, mode, rng, mc_dropout=False):
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    active = mode == "train" or mc_dropout
    if not active or rate == 0.0:
        return x
    mask = rng.keep_mask(x.shape, rate) / (1.0 - rate)
    return ag.mul(x, mask)


def batchnorm3d(x, params, state, mode, momentum=BN_MOMENTUM, eps=BN_EPS):
    """Batch normalization over channels (last axis).

    In train mode ``state`` running statistics are updated in place by an
    exponential moving average (unbiased batch variance).
    """
    c = params["gamma"].shape[0]
    if x.shape[-1] != c:
        raise ValueError(f"batchnorm3d: input channels {x.shape[-1]} (axis -1) != {c}")
    if mode == "train":
        out, mu, var = ag.batch_norm_train(x, params["gamma"], params["beta"], eps)
        if state is not None:
            count = x.data.size // c
            unbiased = var * count / max(count - 1, 1)
            state["running_mean"] = (1 - momentum) * state["running_mean"] + momentum * mu
            state["running_var"] = (1 - momentum) * state["running_var"] + momentum * unbiased
        return out
    scale = 1.0 / np.sqrt(state["running_var"] + eps)
    return ag.add(ag.mul(ag.mul(ag.sub(x, state["running_mean"]), scale), params["gamma"]), params["beta"])


def forward_layer(kind, x, params=None, mode="infer", rng=None, **config):
    """Apply one layer of ``kind`` to ``x``.

    ``config`` carries layer hyperparameters: ``padding``/``stride`` for
    convolutions, ``kernel`` for pooling, ``rate``/``mc_dropout`` for
    dropout, ``slope`` for leaky ReLU and ``state`` for batchnorm.
    """
    x = ag.as_tensor(x)
    if kind == "dense":
        return dense(x, params)
    if kind == "conv3d":
        return ag.conv3d(x, params["weight"], params.get("bias"),
                         padding=config.get("padding", 0), stride=config.get("stride", 1))
    if kind == "conv_transpose3d":
        return ag.conv_transpose3d(x, params["weight"], params.get("bias"), stride=config.get("stride", 2))
    if kind == "avgpool3d":
        return ag.avg_pool3d(x, config.get("kernel", 2))
    if kind == "batchnorm3d":
        return batchnorm3d(x, params, config.get("state"), mode)
    if kind == "leaky_relu":
        return ag.leaky_relu(x, config.get("slope", LEAKY_SLOPE))
    if kind == "dropout":
        return dropout(x, config.get("rate", 0.0), mode, rng, config.get("mc_dropout", False))
    if kind == "softplus":
        return ag.softplus(x)
    if kind == "sigmoid":
        return ag.sigmoid(x)
    raise ValueError(f"unknown layer kind {kind!r}; expected one of {KINDS}")
