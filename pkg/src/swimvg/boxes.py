"""Normalized boxes, IoU/GIoU, the L1 + GIoU regression loss and Pr@tau."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch


class DegenerateBox(ValueError):
    pass


class EmptyList(ValueError):
    pass


@dataclass(frozen=True)
class BoundingBox:
    """Center-form box; coordinates normalized by the canvas size."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise DegenerateBox(f"box has non-positive extent: w={self.w}, h={self.h}")

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "BoundingBox":
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    def corners(self) -> tuple[float, float, float, float]:
        return (
            self.cx - self.w / 2,
            self.cy - self.h / 2,
            self.cx + self.w / 2,
            self.cy + self.h / 2,
        )

    def area(self) -> float:
        return self.w * self.h

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)


def _overlap(a: BoundingBox, b: BoundingBox) -> tuple[float, float, float]:
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = a.area() + b.area() - inter
    hull = (max(ax2, bx2) - min(ax1, bx1)) * (max(ay2, by2) - min(ay1, by1))
    return inter, union, hull


def iou(a: BoundingBox, b: BoundingBox) -> float:
    inter, union, _ = _overlap(a, b)
    return inter / union


def giou(a: BoundingBox, b: BoundingBox) -> float:
    """Generalized IoU in [-1, 1]; symmetric in its arguments."""
    inter, union, hull = _overlap(a, b)
    return inter / union - (hull - union) / hull


def cxcywh_to_xyxy(boxes: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = boxes.unbind(-1)
    return torch.stack((cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2), dim=-1)


def box_iou_giou(pred: torch.Tensor, target: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Elementwise IoU and GIoU for [..., 4] center-form tensors."""
    p = cxcywh_to_xyxy(pred)
    t = cxcywh_to_xyxy(target)
    area_p = (p[..., 2] - p[..., 0]) * (p[..., 3] - p[..., 1])
    area_t = (t[..., 2] - t[..., 0]) * (t[..., 3] - t[..., 1])
    lt = torch.maximum(p[..., :2], t[..., :2])
    rb = torch.minimum(p[..., 2:], t[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_p + area_t - inter
    iou_ = inter / union
    lt_c = torch.minimum(p[..., :2], t[..., :2])
    rb_c = torch.maximum(p[..., 2:], t[..., 2:])
    wh_c = rb_c - lt_c
    hull = wh_c[..., 0] * wh_c[..., 1]
    return iou_, iou_ - (hull - union) / hull


@dataclass(frozen=True)
class LossBreakdown:
    l1: float
    giou_loss: float
    total: float

    def as_dict(self) -> dict[str, float]:
        return {"l1": self.l1, "giou_loss": self.giou_loss, "total": self.total}


def regression_loss(
    pred: torch.Tensor, target: torch.Tensor, lambda_l1: float, lambda_giou: float
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Batch-mean (total, l1, giou_loss) tensors; differentiable in ``pred``.

    L1 is the mean absolute error over the four center-form coordinates.
    """
    if (pred[..., 2:] <= 0).any() or (target[..., 2:] <= 0).any():
        raise DegenerateBox("box with non-positive width or height")
    l1 = (pred - target).abs().mean(dim=-1).mean()
    _, g = box_iou_giou(pred, target)
    giou_loss = (1.0 - g).mean()
    total = lambda_l1 * l1 + lambda_giou * giou_loss
    return total, l1, giou_loss


def grounding_loss(
    pred: BoundingBox, gt: BoundingBox, lambda_l1: float = 1.0, lambda_giou: float = 1.0
) -> LossBreakdown:
    l1 = sum(abs(p - g) for p, g in zip(pred.as_tuple(), gt.as_tuple())) / 4.0
    giou_loss = 1.0 - giou(pred, gt)
    return LossBreakdown(l1=l1, giou_loss=giou_loss, total=lambda_l1 * l1 + lambda_giou * giou_loss)


def precision_at(
    preds: Sequence[BoundingBox], gts: Sequence[BoundingBox], tau: float
) -> float:
    """Fraction of prediction/ground-truth pairs whose IoU is at least ``tau``."""
    if len(preds) != len(gts):
        raise ValueError(f"length mismatch: {len(preds)} predictions vs {len(gts)} targets")
    if not preds:
        raise EmptyList("precision requires at least one pair")
    hits = sum(1 for p, g in zip(preds, gts) if iou(p, g) >= tau)
    return hits / len(preds)
