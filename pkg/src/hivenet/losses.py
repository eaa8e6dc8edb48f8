"""Segmentation (soft Jaccard), proximity regression (MSE) and their blend."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.7
    epsilon: float = 1e-5

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


def jaccard_loss(p: np.ndarray, y: np.ndarray, eps: float = 1e-5) -> tuple[float, np.ndarray]:
    """Soft Jaccard loss over the whole batch and its gradient w.r.t. ``p``.

    ``y`` must be strictly binary.
    """
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _same_shape(p, y, "jaccard_loss")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("jaccard_loss requires a binary target")
    inter = float((p * y).sum())
    union = float(p.sum() + y.sum()) - inter + eps
    loss = 1.0 - inter / union
    # d(I/U)/dp = (y*U - I*(1 - y)) / U^2
    grad = -(y * union - inter * (1.0 - y)) / union ** 2
    return loss, grad


def regression_loss(d_out: np.ndarray, d_target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error and its gradient w.r.t. ``d_out``."""
    d_out = np.asarray(d_out, dtype=np.float64)
    d_target = np.asarray(d_target, dtype=np.float64)
    _same_shape(d_out, d_target, "regression_loss")
    diff = d_out - d_target
    n = diff.size
    return float((diff * diff).sum() / n), 2.0 * diff / n


def total_loss(l_seg: float, l_reg: float, cfg: LossConfig = LossConfig()) -> float:
    return cfg.lam * l_seg + (1.0 - cfg.lam) * l_reg


def network_loss(p, y, d_out, d_target, cfg: LossConfig = LossConfig()):
    """Blend both task losses. Returns ``(total, l_seg, l_reg, grad_p, grad_d)``.

    With ``d_out`` absent (single-task net) or ``lam == 1`` the regression term
    is skipped entirely and ``grad_d``/``l_reg`` are ``None``.
    """
    l_seg, g_seg = jaccard_loss(p, y, cfg.epsilon)
    if d_out is None or cfg.lam == 1.0:
        return l_seg, l_seg, None, g_seg, None
    l_reg, g_reg = regression_loss(d_out, d_target)
    return (total_loss(l_seg, l_reg, cfg), l_seg, l_reg,
            cfg.lam * g_seg, (1.0 - cfg.lam) * g_reg)
