"""Adam with an additive l2 penalty."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps_a: float = 1e-8,
              l2: float = 0.0, decay=None) -> AdamState:
    """Update ``params`` in place with bias-corrected Adam.

    ``l2`` adds ``2 * l2 * theta`` to the gradient (the derivative of
    ``l2 * ||theta||^2``) for every name accepted by ``decay`` (all names
    when ``decay`` is None) before the moment updates.
    """
    state.step += 1
    t = state.step
    for name, theta in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if l2 and (decay is None or decay(name)):
            g = g + 2.0 * l2 * theta
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(theta)
            v = np.zeros_like(theta)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        theta -= lr * m_hat / (np.sqrt(v_hat) + eps_a)
    return state
