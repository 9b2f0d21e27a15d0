"""Adam and NAdam on dict-of-array parameters (pure functions of their inputs)."""
from dataclasses import dataclass, field

import numpy as np

from ..errors import ParameterError


@dataclass
class OptimState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    mu_product: float = 1.0  # NAdam momentum-schedule product


def init_state(params):
    return OptimState(0, {k: np.zeros_like(p) for k, p in params.items()},
                      {k: np.zeros_like(p) for k, p in params.items()}, 1.0)


def _check(params, grads, state):
    if state.step < 0:
        raise ParameterError("optimizer step counter must be >= 0")
    for k, p in params.items():
        if k not in grads or grads[k].shape != p.shape:
            raise ParameterError(f"gradient for {k} missing or mis-shaped")
        if state.m.get(k) is None or state.m[k].shape != p.shape or state.v[k].shape != p.shape:
            raise ParameterError(f"optimizer moments for {k} do not match the parameter shape")


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    _check(params, grads, state)
    t = state.step + 1
    bc1, bc2 = 1.0 - beta1 ** t, 1.0 - beta2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m = beta1 * state.m[k] + (1.0 - beta1) * g
        v = beta2 * state.v[k] + (1.0 - beta2) * g * g
        new_p[k] = p - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_m[k], new_v[k] = m, v
    return new_p, OptimState(t, new_m, new_v, state.mu_product)


def nadam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8, momentum_decay=4e-3):
    """Nesterov-accelerated Adam with Dozat's momentum schedule."""
    _check(params, grads, state)
    t = state.step + 1
    mu = beta1 * (1.0 - 0.5 * 0.96 ** (t * momentum_decay))
    mu_next = beta1 * (1.0 - 0.5 * 0.96 ** ((t + 1) * momentum_decay))
    mu_prod = state.mu_product * mu
    bc2 = 1.0 - beta2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m = beta1 * state.m[k] + (1.0 - beta1) * g
        v = beta2 * state.v[k] + (1.0 - beta2) * g * g
        denom = np.sqrt(v / bc2) + eps
        new_p[k] = (p - lr * (1.0 - mu) / (1.0 - mu_prod) * g / denom
                    - lr * mu_next / (1.0 - mu_prod * mu_next) * m / denom)
        new_m[k], new_v[k] = m, v
    return new_p, OptimState(t, new_m, new_v, mu_prod)
