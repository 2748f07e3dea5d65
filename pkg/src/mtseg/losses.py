"""Segmentation task and consistency losses on autodiff tensors.

All losses reduce over the whole batch at once and are differentiable in
the prediction argument; targets are treated as constants.  Dice and
Tversky return negated overlap ratios in [-1, 0], so lower is better for
every loss here.
"""

import math
from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor

# Keeps empty-vs-empty overlap ratios at 0/eps = 0 instead of 0/0.  Small
# enough that perfect-overlap losses sit within 1e-9 of exactly -1.
OVERLAP_EPS = 1e-10

CE_CLAMP = 1e-7


def _check_pair(p, q, opname):
    if not isinstance(p, Tensor) or not isinstance(q, Tensor):
        raise TypeError(f"{opname}: expected Tensor arguments")
    if p.shape != q.shape:
        raise ShapeError(f"{opname}: prediction {p.shape} vs target {q.shape}")


def dice_loss(p, g):
    """Soft Dice loss: -(2 * sum(p*g)) / (sum(p) + sum(g) + eps)."""
    _check_pair(p, g, "dice_loss")
    num = (p * g).sum() * 2.0
    denom = p.sum() + g.sum() + OVERLAP_EPS
    return -(num / denom)


def tversky_loss(p, g, alpha, beta):
    """Tversky loss with false-positive weight alpha and false-negative
    weight beta.

    Computed in doubled form, -(2*I) / (2*I + 2a*FP + 2b*FN + eps), which
    is the same ratio and makes alpha = beta = 0.5 agree with dice_loss
    bit for bit on binary masks.
    """
    _check_pair(p, g, "tversky_loss")
    if alpha + beta <= 0:
        raise ValueError(f"tversky_loss: alpha + beta must be positive, got {alpha}, {beta}")
    num = (p * g).sum() * 2.0
    fp = (p * (1.0 - g)).sum()
    fn = ((1.0 - p) * g).sum()
    denom = num + fp * (2.0 * alpha) + fn * (2.0 * beta) + OVERLAP_EPS
    return -(num / denom)


def mse_consistency(p, q):
    """Mean squared difference between two probability maps."""
    _check_pair(p, q, "mse_consistency")
    d = p - q
    return (d * d).sum() / float(p.data.size)


def ce_consistency(p, q):
    """Symmetric binary cross-entropy of p against target map q.

    q is clamped to [1e-7, 1 - 1e-7] and treated as a constant; gradients
    flow through p only.
    """
    _check_pair(p, q, "ce_consistency")
    qc = np.clip(q.data, CE_CLAMP, 1.0 - CE_CLAMP)
    log_q = Tensor(np.log(qc))
    log_1q = Tensor(np.log(1.0 - qc))
    return -((p * log_q + (1.0 - p) * log_1q).mean())


def combined_objective(task, consistency, gamma):
    """Total loss task + gamma * consistency.

    Weight decay is not part of this sum; the optimizer applies it
    directly to parameters.  Non-finite inputs are rejected.
    """
    t = task.item() if isinstance(task, Tensor) else float(task)
    c = consistency.item() if isinstance(consistency, Tensor) else float(consistency)
    if not (math.isfinite(t) and math.isfinite(c) and math.isfinite(gamma)):
        raise ValueError(f"combined_objective: non-finite inputs task={t} consistency={c} gamma={gamma}")
    if isinstance(task, Tensor) and isinstance(consistency, Tensor):
        return task + consistency * float(gamma)
    return t + float(gamma) * c


def score_orientation_probe(p, g_hard, g_soft):
    """Dice numerator terms for one pixel scored against a hard and a soft
    target: (p * g_hard, p * g_soft).  With p = 0.9 the soft self-match
    scores 0.81 while the hard match scores 0.9, which is why soft targets
    are never rewarded more than hard ones by the overlap numerator."""
    return (p * g_hard, p * g_soft)


@dataclass(frozen=True)
class LossKind:
    """Named loss selection for the consistency term."""
    name: str
    tversky_alpha: float = 0.5
    tversky_beta: float = 0.5

    _ALIASES = {"cross_entropy": "ce"}
    _VALID = ("dice", "mse", "ce", "tversky")

    def __post_init__(self):
        object.__setattr__(self, "name", self._ALIASES.get(self.name, self.name))
        if self.name not in self._VALID:
            raise ValueError(f"unknown loss kind {self.name!r}, expected one of {self._VALID}")
        if self.tversky_alpha + self.tversky_beta <= 0:
            raise ValueError("tversky weights must sum to a positive value")

    def __call__(self, p, q):
        if self.name == "dice":
            return dice_loss(p, q)
        if self.name == "mse":
            return mse_consistency(p, q)
        if self.name == "ce":
            return ce_consistency(p, q)
        return tversky_loss(p, q, self.tversky_alpha, self.tversky_beta)
