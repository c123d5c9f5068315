"""Quadruplet metric loss and the combined training objective.

The quadruplet hinge uses squared Euclidean distances between the pooled
composed embeddings: anchor-positive (d1), anchor-first-negative (d2), and
negative-negative (d3).  The combined objective mixes the attention
alignment loss and the quadruplet loss with a single weight in [0, 1];
weight 0 is the no-attention ablation arm.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, add, mul, relu, sub


@dataclass(frozen=True)
class QuadrupletConfig:
    """Hinge margins; the second (negative-negative) margin is the softer one."""

    m1: float = 1.0
    m2: float = 0.5

    def __post_init__(self):
        if not (self.m1 >= self.m2 >= 0.0):
            raise ValueError(
                f"QuadrupletConfig: need m1 >= m2 >= 0, got m1={self.m1} m2={self.m2}"
            )


@dataclass(frozen=True)
class LossConfig:
    """``attention_weight`` is the mixing coefficient of the combined loss.

    With ``normalize_embeddings`` the quadruplet distances are taken between
    unit-normalized pooled embeddings, so squared distances live in [0, 4]
    and margins of order one stay attainable regardless of embedding scale;
    without it the hinge on a freshly initialized toy model pushes the
    anchor-positive distance toward zero indefinitely, which also collapses
    the similarity gradient the attention map is built from.
    """

    attention_weight: float = 0.5
    quadruplet: QuadrupletConfig = field(default_factory=QuadrupletConfig)
    detach_channel_weights: bool = False
    normalize_embeddings: bool = True

    def __post_init__(self):
        if not 0.0 <= self.attention_weight <= 1.0:
            raise ValueError(
                f"LossConfig: attention weight must be in [0, 1], "
                f"got {self.attention_weight}"
            )


def _as_distance(x, name: str) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(float(x))
    if np.any(t.data < 0):
        raise ValueError(f"quadruplet_loss: negative distance {name}")
    return t


def quadruplet_loss(d1, d2, d3, cfg: QuadrupletConfig) -> Tensor:
    """max(d1^2 - d2^2 + m1, 0) + max(d1^2 - d3^2 + m2, 0).

    Accepts scalar tensors or floats (and, element-wise, equal-shaped
    vectors of distances).  The hinge subgradient at the kink is 0.
    """
    d1 = _as_distance(d1, "d1")
    d2 = _as_distance(d2, "d2")
    d3 = _as_distance(d3, "d3")
    sq1, sq2, sq3 = mul(d1, d1), mul(d2, d2), mul(d3, d3)
    first = relu(add(sub(sq1, sq2), cfg.m1))
    second = relu(add(sub(sq1, sq3), cfg.m2))
    return add(first, second)


def combine_losses(attention, quadruplet, cfg: LossConfig) -> Tensor:
    """weight * attention + (1 - weight) * quadruplet."""
    w = cfg.attention_weight
    return add(mul(attention, w), mul(quadruplet, 1.0 - w))
