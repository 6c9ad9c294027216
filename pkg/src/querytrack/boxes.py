"""Bounding boxes in center-size form and their overlap measures.

Two parallel surfaces on purpose: plain-float functions for matching costs,
lifecycle filtering and metrics, and tensor functions (batched over [n,4]
rows) that the losses differentiate through. Tests cross-check one against
the other.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

import querytrack.autodiff as ad
from querytrack.autodiff import EPS_GUARD, Tensor

__all__ = ["Box", "iou", "giou", "l1_box", "box_l1_rows", "box_giou_rows"]


@dataclass(frozen=True)
class Box:
    """Axis-aligned box as (cx, cy, w, h), normalized to the image extent.

    Centers may straddle borders; w and h must be nonnegative and within a
    loose sanity bound.
    """

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if self.w < 0 or self.h < 0:
            raise ValueError(f"box sides must be nonnegative, got w={self.w} h={self.h}")
        if self.w > 2 or self.h > 2:
            raise ValueError(f"box sides exceed sanity bound 2: w={self.w} h={self.h}")

    def corners(self) -> tuple[float, float, float, float]:
        hw, hh = self.w / 2.0, self.h / 2.0
        return (self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh)

    def area(self) -> float:
        return self.w * self.h

    def to_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    @staticmethod
    def from_array(a) -> "Box":
        cx, cy, w, h = (float(v) for v in np.asarray(a).reshape(4))
        return Box(cx, cy, w, h)


def _overlap(a: Box, b: Box) -> tuple[float, float, float]:
    """(intersection, union, enclosing) areas."""
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = a.area() + b.area() - inter
    cw = max(ax2, bx2) - min(ax1, bx1)
    ch = max(ay2, by2) - min(ay1, by1)
    return inter, union, cw * ch


def iou(a: Box, b: Box) -> float:
    """Intersection over union in [0, 1]; zero-area union gives 0."""
    inter, union, _ = _overlap(a, b)
    if union <= 0.0:
        return 0.0
    return inter / union


def giou(a: Box, b: Box) -> float:
    """Generalized IoU in [-1, 1]: IoU minus empty enclosing-area fraction."""
    inter, union, enclosing = _overlap(a, b)
    i = inter / union if union > 0.0 else 0.0
    return i - (enclosing - union) / max(enclosing, EPS_GUARD)


def l1_box(a: Box, b: Box) -> float:
    """Sum of absolute coordinate differences in (cx, cy, w, h)."""
    return (
        abs(a.cx - b.cx) + abs(a.cy - b.cy) + abs(a.w - b.w) + abs(a.h - b.h)
    )


# ---------------------------------------------------------------------------
# differentiable row-wise versions, [n, 4] -> [n, 1]
# ---------------------------------------------------------------------------


def _col(t: Tensor, j: int) -> Tensor:
    return ad.slice_axis(t, 1, j, j + 1)


def _corners_t(t: Tensor):
    cx, cy, w, h = (_col(t, j) for j in range(4))
    hw, hh = ad.scale(w, 0.5), ad.scale(h, 0.5)
    return ad.sub(cx, hw), ad.sub(cy, hh), ad.add(cx, hw), ad.add(cy, hh), w, h


def box_l1_rows(pred: Tensor, target: Tensor) -> Tensor:
    """Row-wise coordinate L1 distance between [n,4] box tensors -> [n,1]."""
    return ad.absolute(ad.sub(pred, target)).sum(axis=1, keepdims=True)


def box_giou_rows(pred: Tensor, target: Tensor) -> Tensor:
    """Row-wise generalized IoU between [n,4] box tensors -> [n,1].

    Denominators are guarded so degenerate zero-area rows stay finite.
    """
    ax1, ay1, ax2, ay2, aw, ah = _corners_t(pred)
    bx1, by1, bx2, by2, bw, bh = _corners_t(target)

    iw = ad.relu(ad.sub(ad.minimum(ax2, bx2), ad.maximum(ax1, bx1)))
    ih = ad.relu(ad.sub(ad.minimum(ay2, by2), ad.maximum(ay1, by1)))
    inter = ad.mul(iw, ih)
    union = ad.sub(ad.add(ad.mul(aw, ah), ad.mul(bw, bh)), inter)
    i = ad.div(inter, union)

    cw = ad.sub(ad.maximum(ax2, bx2), ad.minimum(ax1, bx1))
    ch = ad.sub(ad.maximum(ay2, by2), ad.minimum(ay1, by1))
    enclosing = ad.mul(cw, ch)
    return ad.sub(i, ad.div(ad.sub(enclosing, union), enclosing))
