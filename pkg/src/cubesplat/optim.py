"""Adam with decoupled weight decay, plus the warmup+cosine LR schedule."""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError


@dataclass
class OptimizerState:
    """First/second moment accumulators per parameter and the step counter."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def init_state(params_flat):
    state = OptimizerState()
    for name, arr in params_flat.items():
        state.m[name] = np.zeros_like(arr)
        state.v[name] = np.zeros_like(arr)
    return state


def adamw_step(params_flat, grads, state, lr, betas=(0.9, 0.95),
               weight_decay=0.05, eps=1e-8):
    """In-place decoupled-weight-decay Adam update."""
    b1, b2 = betas
    state.step += 1
    t = state.step
    for name, p in params_flat.items():
        g = grads[name]
        if p.shape != g.shape:
            raise InvalidInputError(f"gradient shape mismatch for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p -= lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * p)


def lr_at(step, total_steps, base_lr, warmup_frac):
    """Linear warmup from 0 over warmup_frac of training, then cosine to 0."""
    if total_steps <= 0:
        return base_lr
    warm = int(round(total_steps * warmup_frac))
    if warm > 0 and step < warm:
        return base_lr * step / warm
    span = max(1, total_steps - warm)
    progress = min(1.0, (step - warm) / span)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))
