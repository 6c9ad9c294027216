"""Per-frame detection/tracking loss and its clip-level average.

The frame loss mirrors the matching cost: focal classification plus L1 and
generalized-IoU box regression for matched queries, focal background for
everything else. Per-frame terms are kept split into a track part and a
detect part so the whole clip can be normalized by one shared object count.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

import querytrack.autodiff as ad
from querytrack.autodiff import Tensor
from querytrack.assignment import Assignment, GtObject
from querytrack.boxes import box_giou_rows, box_l1_rows

__all__ = [
    "ClipLossAccumulator",
    "FrameLossTerms",
    "LossWeights",
    "clip_average_loss",
    "focal_loss",
    "frame_loss",
]


@dataclass(frozen=True)
class LossWeights:
    """Weights shared by the matching cost and the loss terms."""

    lambda_cls: float = 2.0
    lambda_l1: float = 5.0
    lambda_giou: float = 2.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0

    def __post_init__(self):
        if min(self.lambda_cls, self.lambda_l1, self.lambda_giou) < 0:
            raise ValueError("loss weights must be nonnegative")
        if max(self.lambda_cls, self.lambda_l1, self.lambda_giou) == 0:
            raise ValueError("at least one loss weight must be positive")


def focal_loss(probs: Tensor, targets: np.ndarray, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Summed binary focal loss of predicted probabilities against 0/1 targets.

    Positive cells contribute -alpha * (1-p)^gamma * log p, negative cells
    -(1-alpha) * p^gamma * log(1-p). The log clamp keeps saturated
    probabilities finite.
    """
    t = Tensor(np.asarray(targets, dtype=np.float64))
    if t.shape != probs.shape:
        raise ad.ShapeError(f"targets shape {t.shape} != probs shape {probs.shape}")
    one_minus_p = 1.0 - probs
    pos = ad.mul(t, ad.pow_scalar(one_minus_p, gamma) * -alpha)
    pos = ad.mul(pos, ad.log(probs))
    neg = ad.mul(1.0 - t, ad.pow_scalar(probs, gamma) * -(1.0 - alpha))
    neg = ad.mul(neg, ad.log(one_minus_p))
    return ad.add(pos, neg).sum()


@dataclass
class FrameLossTerms:
    """One frame's loss split into its track and detect parts.

    `n_tracked` counts tracked objects still present in the ground truth;
    `n_newborn` counts matched newborn objects. Their sum is the frame's
    object count used by the clip normalizer.
    """

    track: Tensor
    detect: Tensor
    n_tracked: int
    n_newborn: int

    @property
    def total(self) -> Tensor:
        return ad.add(self.track, self.detect)

    @property
    def n_objects(self) -> int:
        return self.n_tracked + self.n_newborn


def frame_loss(
    preds,
    track_assign: Assignment,
    detect_assign: Assignment,
    gt_frame: list[GtObject],
    weights: LossWeights,
) -> FrameLossTerms:
    """Loss of one frame under a fixed label assignment.

    Track queries whose identity has left the ground truth are supervised as
    background (their object is gone); a detect pair pointing at a missing
    identity is a caller bug and raises.
    """
    by_identity = {obj.identity: obj for obj in gt_frame}
    n_track = preds.n_track
    n_total, n_classes = preds.class_probs.shape

    class_targets = np.zeros((n_total, n_classes))
    track_rows, track_targets = [], []
    for slot, ident in track_assign.pairs:
        obj = by_identity.get(ident)
        if obj is None:
            continue  # dead object: background supervision
        class_targets[slot, obj.class_id] = 1.0
        track_rows.append(slot)
        track_targets.append(obj.box.to_array())
    detect_rows, detect_targets = [], []
    for slot, ident in detect_assign.pairs:
        obj = by_identity.get(ident)
        if obj is None:
            raise ValueError(f"detect assignment references missing identity {ident}")
        class_targets[n_track + slot, obj.class_id] = 1.0
        detect_rows.append(n_track + slot)
        detect_targets.append(obj.box.to_array())

    def block_loss(row_lo: int, row_hi: int, rows: list[int], targets: list) -> Tensor:
        probs = ad.slice_axis(preds.class_probs, 0, row_lo, row_hi)
        loss = ad.scale(
            focal_loss(probs, class_targets[row_lo:row_hi], weights.focal_alpha, weights.focal_gamma),
            weights.lambda_cls,
        )
        if rows:
            boxes = ad.gather_rows(preds.boxes, rows)
            gt = Tensor(np.stack(targets))
            l1 = box_l1_rows(boxes, gt).sum()
            giou_term = (1.0 - box_giou_rows(boxes, gt)).sum()
            loss = ad.add(loss, ad.add(ad.scale(l1, weights.lambda_l1), ad.scale(giou_term, weights.lambda_giou)))
        return loss

    return FrameLossTerms(
        track=block_loss(0, n_track, track_rows, track_targets),
        detect=block_loss(n_track, n_total, detect_rows, detect_targets),
        n_tracked=len(track_rows),
        n_newborn=len(detect_rows),
    )


@dataclass
class ClipLossAccumulator:
    """Per-frame loss terms and object counts collected over one clip."""

    frames: list[FrameLossTerms] = field(default_factory=list)

    def add(self, terms: FrameLossTerms) -> None:
        self.frames.append(terms)

    @property
    def total_objects(self) -> int:
        return sum(f.n_objects for f in self.frames)


def clip_average_loss(acc: ClipLossAccumulator) -> Tensor:
    """Sum of all frame terms divided by the clip's total object count.

    The denominator is clamped at 1 so clips with no objects still train on
    their background terms. One backward pass through the result reaches
    every frame.
    """
    if not acc.frames:
        raise ValueError("loss accumulator has no frames")
    total = acc.frames[0].total
    for terms in acc.frames[1:]:
        total = ad.add(total, terms.total)
    return ad.scale(total, 1.0 / max(acc.total_objects, 1))
