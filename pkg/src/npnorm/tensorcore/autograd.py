"""Reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Tensor` wraps an immutable array. Operations on tensors that
require gradients record their parents and a closure mapping the output
gradient to parent gradients; :func:`backward` walks that graph once in
reverse topological order.

Volumetric ops use a channels-last layout ``(N, T1, T2, T3, C)``; kernels
are ``(k1, k2, k3, C_in, C_out)``.
"""
import numpy as np
from scipy.special import expit


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _grad_fn=None):
        arr = np.asarray(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._grad_fn = _grad_fn

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return np.array(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, grad_fn):
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _grad_fn=grad_fn)
    return Tensor(data)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def grad_fn(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), grad_fn)


def square(a):
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sigmoid(a):
    a = as_tensor(a)
    out = expit(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a):
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _make(out, (a,), lambda g: (g * expit(x),))


def leaky_relu(a, slope=0.01):
    a = as_tensor(a)
    pos = a.data > 0
    out = np.where(pos, a.data, slope * a.data)
    return _make(out, (a,), lambda g: (np.where(pos, g, slope * g),))


def clamp_min(a, floor):
    """max(a, floor); the gradient is zero where the floor is active."""
    a = as_tensor(a)
    keep = a.data >= floor
    return _make(np.where(keep, a.data, floor), (a,), lambda g: (np.where(keep, g, 0.0),))


# ---------------------------------------------------------------- reductions / shape

def sum(a, axis=None):  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    out = a.data.sum(axis=axis)

    def grad_fn(g):
        g = np.asarray(g)
        if axis is not None:
            axes = (axis,) if np.isscalar(axis) else tuple(axis)
            axes = tuple(ax % a.ndim for ax in axes)
            for ax in sorted(axes):
                g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), grad_fn)


def mean(a, axis=None):
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod(
        [a.shape[ax] for ax in ((axis,) if np.isscalar(axis) else axis)])
    return mul(sum(a, axis=axis), 1.0 / count)


def reshape(a, shape):
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes):
    a = as_tensor(a)
    inverse = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tensors, grad_fn)


def take(a, index):
    """Basic slicing ``a[index]`` with scatter-back gradient."""
    a = as_tensor(a)

    def grad_fn(g):
        full = np.zeros(a.shape)
        full[index] = g
        return (full,)

    return _make(a.data[index], (a,), grad_fn)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


# ---------------------------------------------------------------- volumetric

def _offsets(kshape):
    return [(i, j, k) for i in range(kshape[0]) for j in range(kshape[1]) for k in range(kshape[2])]


def conv3d(x, w, b=None, padding=0, stride=1):
    """Direct-summation 3-D convolution (cross-correlation), channels last.

    Output extent per axis: ``(T + 2*padding - k) // stride + 1``.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 5 or w.ndim != 5:
        raise ValueError(f"conv3d expects 5-D input and kernel, got {x.shape} and {w.shape}")
    if x.shape[4] != w.shape[3]:
        raise ValueError(f"conv3d: input channels {x.shape[4]} != kernel in-channels {w.shape[3]} (axis 4)")
    pad = (padding,) * 3 if np.isscalar(padding) else tuple(padding)
    n, t1, t2, t3, _ = x.shape
    k = w.shape[:3]
    xp = np.pad(x.data, ((0, 0), (pad[0], pad[0]), (pad[1], pad[1]), (pad[2], pad[2]), (0, 0)))
    out_sp = tuple((xp.shape[i + 1] - k[i]) // stride + 1 for i in range(3))
    if min(out_sp) < 1:
        raise ValueError(f"conv3d: kernel {k} larger than padded input {xp.shape[1:4]} (axes 1-3)")
    spans = [stride * (o - 1) + 1 for o in out_sp]
    c_out = w.shape[4]
    out = np.zeros((n,) + out_sp + (c_out,))
    offs = _offsets(k)
    for (i, j, l) in offs:
        out += xp[:, i:i + spans[0]:stride, j:j + spans[1]:stride, l:l + spans[2]:stride, :] @ w.data[i, j, l]
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out += b.data
        parents.append(b)

    def grad_fn(g):
        gx = np.zeros(xp.shape) if x.requires_grad else None
        gw = np.zeros(w.shape) if w.requires_grad else None
        g2 = g.reshape(-1, c_out)
        for (i, j, l) in offs:
            sl = (slice(None), slice(i, i + spans[0], stride), slice(j, j + spans[1], stride),
                  slice(l, l + spans[2], stride), slice(None))
            if gw is not None:
                patch = xp[sl]
                gw[i, j, l] = patch.reshape(-1, patch.shape[-1]).T @ g2
            if gx is not None:
                gx[sl] += g @ w.data[i, j, l].T
        if gx is not None:
            gx = gx[:, pad[0]:pad[0] + t1, pad[1]:pad[1] + t2, pad[2]:pad[2] + t3, :]
        grads = [gx, gw]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _make(out, parents, grad_fn)


def conv_transpose3d(x, w, b=None, stride=2):
    """Transposed 3-D convolution without padding, channels last.

    Output extent per axis: ``(T - 1) * stride + k``.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 5 or w.ndim != 5:
        raise ValueError(f"conv_transpose3d expects 5-D input and kernel, got {x.shape} and {w.shape}")
    if x.shape[4] != w.shape[3]:
        raise ValueError(
            f"conv_transpose3d: input channels {x.shape[4]} != kernel in-channels {w.shape[3]} (axis 4)")
    n = x.shape[0]
    k = w.shape[:3]
    in_sp = x.shape[1:4]
    out_sp = tuple((in_sp[i] - 1) * stride + k[i] for i in range(3))
    spans = [stride * (t - 1) + 1 for t in in_sp]
    c_out = w.shape[4]
    out = np.zeros((n,) + out_sp + (c_out,))
    offs = _offsets(k)
    for (i, j, l) in offs:
        out[:, i:i + spans[0]:stride, j:j + spans[1]:stride, l:l + spans[2]:stride, :] += x.data @ w.data[i, j, l]
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out += b.data
        parents.append(b)

    def grad_fn(g):
        gx = np.zeros(x.shape) if x.requires_grad else None
        gw = np.zeros(w.shape) if w.requires_grad else None
        x2 = x.data.reshape(-1, x.shape[4])
        for (i, j, l) in offs:
            gs = g[:, i:i + spans[0]:stride, j:j + spans[1]:stride, l:l + spans[2]:stride, :]
            if gw is not None:
                gw[i, j, l] = x2.T @ gs.reshape(-1, c_out)
            if gx is not None:
                gx += gs @ w.data[i, j, l].T
        grads = [gx, gw]
        if b is not None:
            grads.append(g.reshape(-1, c_out).sum(axis=0))
        return tuple(grads)

    return _make(out, parents, grad_fn)


def avg_pool3d(x, kernel):
    """Non-overlapping average pooling (stride = kernel), floor mode."""
    x = as_tensor(x)
    kernel = (kernel,) * 3 if np.isscalar(kernel) else tuple(kernel)
    n, t1, t2, t3, c = x.shape
    out_sp = tuple(x.shape[i + 1] // kernel[i] for i in range(3))
    if min(out_sp) < 1:
        raise ValueError(f"avg_pool3d: kernel {kernel} exceeds input extent {x.shape[1:4]} (axes 1-3)")
    used = tuple(out_sp[i] * kernel[i] for i in range(3))
    crop = x.data[:, :used[0], :used[1], :used[2], :]
    blocks = crop.reshape(n, out_sp[0], kernel[0], out_sp[1], kernel[1], out_sp[2], kernel[2], c)
    out = blocks.mean(axis=(2, 4, 6))
    scale = 1.0 / (kernel[0] * kernel[1] * kernel[2])

    def grad_fn(g):
        gx = np.zeros(x.shape)
        spread = np.broadcast_to(
            (g * scale)[:, :, None, :, None, :, None, :],
            (n, out_sp[0], kernel[0], out_sp[1], kernel[1], out_sp[2], kernel[2], c),
        )
        gx[:, :used[0], :used[1], :used[2], :] = spread.reshape(n, used[0], used[1], used[2], c)
        return (gx,)

    return _make(out, (x,), grad_fn)


def batch_norm_train(x, gamma, beta, eps=1e-5):
    """Batch normalization with batch statistics over all axes but the last.

    Returns the output tensor plus the (mean, biased variance) used.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    axes = tuple(range(x.ndim - 1))
    mu = x.data.mean(axis=axes)
    var = x.data.var(axis=axes)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = gamma.data * xhat + beta.data
    count = x.data.size // x.shape[-1]

    def grad_fn(g):
        dxhat = g * gamma.data
        gx = (inv_std / count) * (count * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _make(out, (x, gamma, beta), grad_fn), mu, var


# ---------------------------------------------------------------- backward

def backward(loss, params=None):
    """Gradients of scalar ``loss`` w.r.t. every graph leaf requiring grad.

    If ``params`` (mapping name -> Tensor) is given, returns a dict with a
    gradient for each, zero for parameters the loss does not depend on.
    """
    loss = as_tensor(loss)
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    grads = {id(loss): np.ones(loss.shape)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._grad_fn is None:
            continue
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    if params is None:
        return {id(k): v for k, v in grads.items()}
    return {name: np.array(grads.get(id(t), np.zeros(t.shape))).reshape(t.shape)
            for name, t in params.items()}
