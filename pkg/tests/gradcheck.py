"""Central finite-difference gradient checking shared by the test modules."""
import numpy as np

from npnorm.tensorcore import autograd as ag

FD_STEP = 1e-5
NET_FD_STEP = 1e-6  # smaller stencil: composed networks have many leaky-ReLU kinks
REL_TOL = 1e-4


def relative_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def check_gradients(fn, arrays, rng, coords=None, step=FD_STEP):
    """Compare analytic and central-difference gradients of ``sum(fn(*x) * R)``.

    ``fn`` maps tensors to a tensor; ``R`` is a fixed random weighting so the
    upstream gradient is generic. With ``coords`` set, only that many random
    coordinates per input are differenced, plus one random direction over all
    inputs. Returns the worst relative error.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe = fn(*[ag.Tensor(a) for a in arrays])
    weight = rng.standard_normal(probe.shape)

    def loss(vals):
        return float(np.sum(fn(*[ag.Tensor(v) for v in vals]).data * weight))

    leaves = [ag.Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*leaves)
    total = ag.sum(ag.mul(out, weight))
    grads = ag.backward(total, {str(i): t for i, t in enumerate(leaves)})
    worst = 0.0
    for i, a in enumerate(arrays):
        flat_idx = np.arange(a.size) if coords is None else rng.choice(a.size, min(coords, a.size), replace=False)
        numeric = np.empty(flat_idx.size)
        for j, k in enumerate(flat_idx):
            plus = [v.copy() for v in arrays]
            minus = [v.copy() for v in arrays]
            plus[i].flat[k] += step
            minus[i].flat[k] -= step
            numeric[j] = (loss(plus) - loss(minus)) / (2 * step)
        worst = max(worst, relative_error(grads[str(i)].ravel()[flat_idx], numeric))
    if coords is not None:
        dirs = [rng.standard_normal(a.shape) for a in arrays]
        plus = [a + step * d for a, d in zip(arrays, dirs)]
        minus = [a - step * d for a, d in zip(arrays, dirs)]
        numeric = (loss(plus) - loss(minus)) / (2 * step)
        analytic = sum(float(np.sum(grads[str(i)] * d)) for i, d in enumerate(dirs))
        worst = max(worst, relative_error([analytic], [numeric]))
    return worst


def check_param_gradients(loss_fn, params, rng, coords=20, step=NET_FD_STEP):
    """Finite-difference check of a scalar ``loss_fn(P)`` over named parameters.

    ``loss_fn`` maps a dict of tensors to a scalar tensor. ``coords``
    coordinates are sampled across all parameters (uniformly over the
    flattened concatenation), plus one random direction over everything.
    Returns the worst relative error.
    """
    names = sorted(params)

    def value(arrays):
        return float(loss_fn({k: ag.Tensor(v) for k, v in arrays.items()}).data)

    leaves = {k: ag.Tensor(params[k], requires_grad=True) for k in names}
    grads = ag.backward(loss_fn(leaves), leaves)
    sizes = np.array([params[k].size for k in names])
    flat = rng.choice(sizes.sum(), min(coords, sizes.sum()), replace=False)
    owner = np.searchsorted(np.cumsum(sizes), flat, side="right")
    analytic, numeric = [], []
    for f, o in zip(flat, owner):
        name = names[o]
        k = f - (np.cumsum(sizes)[o - 1] if o else 0)
        plus = {n: np.array(v, dtype=np.float64) for n, v in params.items()}
        minus = {n: np.array(v, dtype=np.float64) for n, v in params.items()}
        plus[name].flat[k] += step
        minus[name].flat[k] -= step
        numeric.append((value(plus) - value(minus)) / (2 * step))
        analytic.append(grads[name].flat[k])
    worst = relative_error(analytic, numeric)
    dirs = {k: rng.standard_normal(params[k].shape) for k in names}
    plus = {k: params[k] + step * dirs[k] for k in names}
    minus = {k: params[k] - step * dirs[k] for k in names}
    numeric = (value(plus) - value(minus)) / (2 * step)
    along = sum(float(np.sum(grads[k] * dirs[k])) for k in names)
    return max(worst, relative_error([along], [numeric]))


def away_from_zero(rng, shape, margin=0.05):
    """Standard-normal draws pushed away from the kinks of piecewise-linear ops."""
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


# ---------------------------------------------------------------- op catalogue
# Each entry: name -> (builder(rng) -> list of arrays, fn(*tensors) -> tensor).

def _conv_case(rng):
    return [rng.standard_normal((2, 4, 3, 4, 2)), rng.standard_normal((3, 3, 3, 2, 3)), rng.standard_normal(3)]


OPS = {
    "add": (lambda r: [r.standard_normal((3, 4)), r.standard_normal((4,))], lambda a, b: ag.add(a, b)),
    "sub": (lambda r: [r.standard_normal((3, 4)), r.standard_normal((3, 1))], lambda a, b: ag.sub(a, b)),
    "mul": (lambda r: [r.standard_normal((3, 4)), r.standard_normal((3, 4))], lambda a, b: ag.mul(a, b)),
    "div": (lambda r: [r.standard_normal((3, 4)), 1.5 + r.uniform(0, 1, (3, 4))], lambda a, b: ag.div(a, b)),
    "square": (lambda r: [r.standard_normal((5, 3))], ag.square),
    "exp": (lambda r: [r.standard_normal((5, 3))], ag.exp),
    "log": (lambda r: [0.5 + r.uniform(0, 2, (5, 3))], ag.log),
    "sigmoid": (lambda r: [2 * r.standard_normal((5, 3))], ag.sigmoid),
    "softplus": (lambda r: [2 * r.standard_normal((5, 3))], ag.softplus),
    "leaky_relu": (lambda r: [away_from_zero(r, (5, 3))], lambda a: ag.leaky_relu(a, 0.01)),
    "clamp_min": (lambda r: [away_from_zero(r, (5, 3))], lambda a: ag.clamp_min(a, 0.0)),
    "sum": (lambda r: [r.standard_normal((3, 4, 2))], lambda a: ag.sum(a, axis=1)),
    "mean": (lambda r: [r.standard_normal((3, 4, 2))], lambda a: ag.mean(a, axis=(0, 2))),
    "reshape": (lambda r: [r.standard_normal((3, 4, 2))], lambda a: ag.reshape(a, (4, 6))),
    "transpose": (lambda r: [r.standard_normal((3, 4, 2))], lambda a: ag.transpose(a, (2, 0, 1))),
    "concat": (lambda r: [r.standard_normal((3, 2)), r.standard_normal((3, 5))], lambda a, b: ag.concat([a, b], 1)),
    "take": (lambda r: [r.standard_normal((4, 5, 3))], lambda a: ag.take(a, (slice(1, 3), slice(None), slice(0, 2)))),
    "matmul": (lambda r: [r.standard_normal((4, 3)), r.standard_normal((3, 5))], lambda a, b: ag.matmul(a, b)),
    "conv3d": (_conv_case, lambda x, w, b: ag.conv3d(x, w, b, padding=1)),
    "conv3d_stride2": (_conv_case, lambda x, w, b: ag.conv3d(x, w, b, padding=1, stride=2)),
    "conv_transpose3d": (lambda r: [r.standard_normal((2, 2, 3, 2, 3)), r.standard_normal((2, 2, 2, 3, 2)),
                                    r.standard_normal(2)],
                         lambda x, w, b: ag.conv_transpose3d(x, w, b, stride=2)),
    "avg_pool3d": (lambda r: [r.standard_normal((2, 4, 5, 4, 2))], lambda x: ag.avg_pool3d(x, (2, 2, 2))),
    "batch_norm": (lambda r: [r.standard_normal((3, 2, 3, 2, 2)), 1 + 0.3 * r.standard_normal(2),
                              r.standard_normal(2)],
                   lambda x, g, b: ag.batch_norm_train(x, g, b)[0]),
}
