"""BCE + soft-IoU per output map and the level-weighted multi-branch total."""

from __future__ import annotations

from typing import Mapping, Sequence, Tuple

from .tensor import ShapeError, Tensor, as_tensor, clamp, log

DEFAULT_LAMBDAS = (1.0, 0.8, 0.6, 0.4, 0.2)
BRANCHES = ("R", "D", "S")
LEVELS = 5
BCE_CLAMP = 1e-7
IOU_SMOOTH = 1.0


def _pair(pred, gt) -> Tuple[Tensor, Tensor]:
    pred, gt = as_tensor(pred), as_tensor(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    return pred, gt


def bce_loss(pred, gt) -> Tensor:
    pred, gt = _pair(pred, gt)
    p = clamp(pred, BCE_CLAMP, 1.0 - BCE_CLAMP)
    return -(gt * log(p) + (1.0 - gt) * log(1.0 - p)).mean()


def iou_loss(pred, gt) -> Tensor:
    """1 - (sum pg + 1) / (sum p + sum g - sum pg + 1); NCHW batches average the per-image value."""
    pred, gt = _pair(pred, gt)
    axis = (1, 2, 3) if pred.ndim == 4 else None
    inter = (pred * gt).sum(axis=axis)
    union = pred.sum(axis=axis) + gt.sum(axis=axis) - inter
    return (1.0 - (inter + IOU_SMOOTH) / (union + IOU_SMOOTH)).mean()


def level_loss(pred, gt) -> Tensor:
    return bce_loss(pred, gt) + iou_loss(pred, gt)


def multilevel_loss(maps: Mapping[Tuple[str, int], Tensor], gt, weights: Sequence[float] = DEFAULT_LAMBDAS) -> Tensor:
    """sum_i lambda_i (L_i(R) + L_i(D) + L_i(S)) with L = BCE + IoU.

    ``maps`` is keyed by (branch, level) with branch in R/D/S and level 1..5;
    anything exposing ``.maps`` (a forward result) is accepted too.
    """
    maps = getattr(maps, "maps", maps)
    weights = tuple(float(w) for w in weights)
    if len(weights) != LEVELS or any(w < 0 for w in weights):
        raise ValueError(f"need {LEVELS} non-negative level weights, got {weights}")
    missing = [(b, i) for i in range(1, LEVELS + 1) for b in BRANCHES if (b, i) not in maps]
    if missing:
        raise KeyError(f"multilevel_loss: missing outputs {missing}")
    gt = as_tensor(gt)
    total = None
    for i, lam in enumerate(weights, start=1):
        level = level_loss(maps[("R", i)], gt) + level_loss(maps[("D", i)], gt) + level_loss(maps[("S", i)], gt)
        term = level * lam
        total = term if total is None else total + term
    return total
