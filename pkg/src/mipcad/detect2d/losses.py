"""Soft dice loss."""

from __future__ import annotations

import numpy as np
import torch

from ..errors import ContractError

DICE_EPS = 1.0


def soft_dice_loss(pred: torch.Tensor, target: torch.Tensor, eps: float = DICE_EPS, per_sample: bool = True) -> torch.Tensor:
    """``1 - (2 sum(XY) + eps) / (sum X + sum Y + eps)``, averaged over the batch.

    With ``per_sample`` the ratio is formed per leading-axis item, which keeps
    empty (nodule-free) targets from being swamped by positive ones.
    """
    if pred.shape != target.shape:
        raise ContractError(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    if per_sample and pred.ndim > 1:
        dims = tuple(range(1, pred.ndim))
        inter = (pred * target).sum(dims)
        total = pred.sum(dims) + target.sum(dims)
    else:
        inter = (pred * target).sum()
        total = pred.sum() + target.sum()
    return (1.0 - (2.0 * inter + eps) / (total + eps)).mean()


def dice_loss(pred, target, eps: float = DICE_EPS) -> float:
    """Dice loss of two whole arrays, as a Python float."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ContractError(f"prediction {pred.shape} and target {target.shape} differ")
    denom = pred.sum() + target.sum() + eps
    if denom == 0:
        raise ContractError("dice loss is undefined for two empty maps with eps=0")
    return float(1.0 - (2.0 * (pred * target).sum() + eps) / denom)


def dice_score(pred_binary, target_binary) -> float:
    """Hard dice coefficient of two boolean arrays (1.0 when both are empty)."""
    a = np.asarray(pred_binary, dtype=bool)
    b = np.asarray(target_binary, dtype=bool)
    total = a.sum() + b.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / total)
