"""
Training-side losses over a batch of predictions p and targets q, each
returning its value and the analytic gradient with respect to p.
"""

import math
from typing import Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator
from scipy import special

from shared.errors import DegenerateRange, LengthMismatch, ZeroVariance

_FIDELITY_EPS = 1e-12
_SQRT2 = math.sqrt(2.0)


class LossValue(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    value: float
    gradient: np.ndarray

    @model_validator(mode="after")
    def _check(self) -> "LossValue":
        if not math.isfinite(self.value):
            raise ValueError(f"loss value must be finite, got {self.value}")
        return self

    def __add__(self, other: "LossValue") -> "LossValue":
        return LossValue(value=self.value + other.value, gradient=self.gradient + other.gradient)


def _vectors(p, q, minimum: int) -> Tuple[np.ndarray, np.ndarray]:
    p = np.asarray(p, dtype=np.float64).ravel()
    q = np.asarray(q, dtype=np.float64).ravel()
    if p.size != q.size:
        raise LengthMismatch(f"p has {p.size} values, q has {q.size}")
    if p.size < minimum:
        raise ValueError(f"need at least {minimum} values, got {p.size}")
    return p, q


def mse_loss(p, q) -> LossValue:
    p, q = _vectors(p, q, 1)
    diff = p - q
    return LossValue(value=float(np.mean(diff**2)), gradient=2.0 * diff / p.size)


def plcc_loss(p, q) -> LossValue:
    """(1 - r) / 2 with r the Pearson correlation; bounded in [0, 1]."""
    p, q = _vectors(p, q, 2)
    a = p - p.mean()
    b = q - q.mean()
    saa = float(a @ a)
    sbb = float(b @ b)
    if saa == 0.0 or sbb == 0.0:
        raise ZeroVariance("PLCC loss is undefined for a constant vector")
    norm = math.sqrt(saa * sbb)
    r = float(a @ b) / norm
    dr = b / norm - r * a / saa
    return LossValue(value=(1.0 - min(1.0, max(-1.0, r))) / 2.0, gradient=-dr / 2.0)


def rank_loss(p, q, margin: float = 0.0) -> LossValue:
    """
    Mean over ground-truth-ordered pairs (q_i > q_j) of
    max(0, margin - (p_i - p_j)). Tied targets contribute no pair; the
    subgradient at the hinge kink is 0.
    """
    if margin < 0:
        raise ValueError(f"margin must be non-negative, got {margin}")
    p, q = _vectors(p, q, 2)
    ordered = q[:, None] > q[None, :]
    pairs = int(ordered.sum())
    if pairs == 0:
        return LossValue(value=0.0, gradient=np.zeros_like(p))

    hinge = margin - (p[:, None] - p[None, :])
    active = ordered & (hinge > 0.0)
    value = float(np.sum(np.where(active, hinge, 0.0))) / pairs
    # d/dp_i of (margin - p_i + p_j) is -1, d/dp_j is +1
    gradient = (active.sum(axis=0) - active.sum(axis=1)).astype(np.float64) / pairs
    return LossValue(value=value, gradient=gradient)


def fidelity_loss(p, q) -> LossValue:
    """
    Pairwise fidelity loss with a Gaussian link: for every ordered pair
    i != j, 1 - sqrt(P_hat * P) - sqrt((1 - P_hat) * (1 - P)) with
    P_hat = Phi((p_i - p_j) / sqrt(2)) and P = 1, 0 or 0.5 on tied targets.
    """
    p, q = _vectors(p, q, 2)
    n = p.size
    off_diagonal = ~np.eye(n, dtype=bool)

    target = np.where(q[:, None] > q[None, :], 1.0, 0.0)
    target = np.where(q[:, None] == q[None, :], 0.5, target)

    d = (p[:, None] - p[None, :]) / _SQRT2
    raw = special.ndtr(d)
    p_hat = np.clip(raw, _FIDELITY_EPS, 1.0 - _FIDELITY_EPS)
    pair_loss = 1.0 - np.sqrt(p_hat * target) - np.sqrt((1.0 - p_hat) * (1.0 - target))
    count = n * (n - 1)
    value = float(np.sum(np.where(off_diagonal, pair_loss, 0.0))) / count

    dloss_dphat = -0.5 * np.sqrt(target / p_hat) + 0.5 * np.sqrt((1.0 - target) / (1.0 - p_hat))
    unclipped = (raw > _FIDELITY_EPS) & (raw < 1.0 - _FIDELITY_EPS) & off_diagonal
    density = np.exp(-0.5 * d * d) / math.sqrt(2.0 * math.pi)
    g = np.where(unclipped, dloss_dphat * density / _SQRT2, 0.0)
    gradient = (g.sum(axis=1) - g.sum(axis=0)) / count
    return LossValue(value=value, gradient=gradient)


def composite_loss(p, q) -> LossValue:
    return rank_loss(p, q, margin=0.0) + plcc_loss(p, q)


def map_scores(p, q) -> np.ndarray:
    """
    Linearly map p onto the range of q. The output's minimum and maximum equal
    min(q) and max(q) exactly and the order of p is preserved.
    """
    p = np.asarray(p, dtype=np.float64).ravel()
    q = np.asarray(q, dtype=np.float64).ravel()
    if p.size == 0 or q.size == 0:
        raise ValueError("map_scores needs non-empty vectors")
    p_min, p_max = float(p.min()), float(p.max())
    q_min, q_max = float(q.min()), float(q.max())
    if p_max <= p_min:
        raise DegenerateRange("all predictions are equal; the mapping is undefined")
    mapped = (p - p_min) / (p_max - p_min) * (q_max - q_min) + q_min
    mapped = np.clip(mapped, q_min, q_max)
    mapped[p == p_min] = q_min
    mapped[p == p_max] = q_max
    return mapped
