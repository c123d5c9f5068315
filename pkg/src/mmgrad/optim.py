"""AdamW with decoupled weight decay, operating on named parameter arrays."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor

logger = logging.getLogger(__name__)


@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def init_state(params: dict[str, Tensor]) -> AdamWState:
    state = AdamWState()
    for name, p in params.items():
        state.m[name] = np.zeros_like(p.data)
        state.v[name] = np.zeros_like(p.data)
    return state


def adamw_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    *,
    lr: float,
    weight_decay: float = 0.0,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> bool:
    """One decoupled-weight-decay Adam update, in place.

    Weight decay multiplies parameters directly (never enters the moments).
    A non-finite gradient skips the whole step, logs the incident, and
    returns False.
    """
    if lr <= 0:
        raise ValueError(f"adamw_step: learning rate must be positive, got {lr}")
    for name, g in grads.items():
        if g.shape != params[name].data.shape:
            raise ValueError(
                f"adamw_step: gradient shape {g.shape} does not match "
                f"parameter {name} shape {params[name].data.shape}"
            )
        if not np.all(np.isfinite(g)):
            logger.warning("adamw_step: non-finite gradient for %r; step skipped", name)
            return False

    b1, b2 = betas
    state.step += 1
    t = state.step
    correction1 = 1.0 - b1**t
    correction2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.data -= lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
    return True
