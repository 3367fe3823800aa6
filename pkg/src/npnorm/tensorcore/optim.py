from dataclasses import dataclass, field

import numpy as np


def validate_schedule(lr_start, lr_end, epochs):
    if epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")
    if not (lr_start > 0 and lr_end > 0):
        raise ValueError(f"learning rates must be positive, got {lr_start} -> {lr_end}")
    if lr_end > lr_start:
        raise ValueError(f"learning rate must decrease, got {lr_start} -> {lr_end}")


def geometric_schedule(lr_start, lr_end, epochs):
    """Per-epoch learning rates decaying geometrically from start to end."""
    validate_schedule(lr_start, lr_end, epochs)
    if epochs == 1:
        return np.array([lr_start])
    return lr_start * (lr_end / lr_start) ** (np.arange(epochs) / (epochs - 1))


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state, params, grads, lr):
    """One bias-corrected ADAM update. Returns new params; mutates ``state``."""
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    updated = dict(params)
    for name, g in grads.items():
        m = b1 * state.m.get(name, 0.0) + (1.0 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1.0 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        updated[name] = params[name] - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return updated
