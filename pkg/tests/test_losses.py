import numpy as np
import pytest

import querytrack.autodiff as ad
from querytrack.autodiff import Tensor
from querytrack.assignment import Assignment, GtObject
from querytrack.boxes import Box, giou, l1_box
from querytrack.losses import (
    ClipLossAccumulator,
    FrameLossTerms,
    LossWeights,
    clip_average_loss,
    focal_loss,
    frame_loss,
)


class StubPreds:
    """Minimal predictions carrier: probabilities, boxes, track-block size."""

    def __init__(self, probs, boxes, n_track=0):
        self.class_probs = Tensor(np.asarray(probs, dtype=np.float64))
        self.boxes = Tensor(np.asarray(boxes, dtype=np.float64))
        self.n_track = n_track


W = LossWeights(lambda_cls=2.0, lambda_l1=5.0, lambda_giou=2.0)


class TestFocal:
    def test_saturated_positive_goes_to_zero(self):
        assert focal_loss(Tensor([[1.0]]), [[1.0]]).item() == 0.0

    def test_positive_at_half(self):
        expected = 0.25 * 0.25 * np.log(2.0)
        assert focal_loss(Tensor([[0.5]]), [[1.0]]).item() == pytest.approx(expected, abs=1e-12)
        assert focal_loss(Tensor([[0.5]]), [[1.0]]).item() == pytest.approx(0.04332, abs=1e-5)

    def test_negative_at_half(self):
        expected = 0.75 * 0.25 * np.log(2.0)
        assert focal_loss(Tensor([[0.5]]), [[0.0]]).item() == pytest.approx(expected, abs=1e-12)
        assert focal_loss(Tensor([[0.5]]), [[0.0]]).item() == pytest.approx(0.12997, abs=1e-5)

    def test_gradient(self):
        rng = np.random.default_rng(0)
        p = Tensor(rng.uniform(0.1, 0.9, size=(4, 2)))
        t = (rng.random((4, 2)) < 0.4).astype(float)
        assert ad.grad_check(lambda p: focal_loss(p, t), [p]).passed


class TestFrameLoss:
    def test_perfect_matched_prediction(self):
        b = Box(0.4, 0.4, 0.2, 0.2)
        preds = StubPreds([[1.0]], [b.to_array()], n_track=0)
        out = frame_loss(preds, Assignment(), Assignment([(0, 7)]), [GtObject(7, b)], W)
        assert out.detect.item() == pytest.approx(0.0, abs=1e-12)
        assert out.track.item() == 0.0
        assert out.n_objects == 1

    def test_worked_composite_value(self):
        # scaled quarter-offset pair: l1 = 0.3, giou = 1/7 - 2/9 ~ -0.07937
        pred_box = Box(0.15, 0.15, 0.3, 0.3)
        gt_box = Box(0.3, 0.3, 0.3, 0.3)
        assert l1_box(pred_box, gt_box) == pytest.approx(0.3, abs=1e-12)
        assert giou(pred_box, gt_box) == pytest.approx(-0.07937, abs=1e-5)
        preds = StubPreds([[0.5]], [pred_box.to_array()], n_track=0)
        out = frame_loss(preds, Assignment(), Assignment([(0, 1)]), [GtObject(1, gt_box)], W)
        manual = (
            2.0 * 0.25 * 0.25 * np.log(2.0)
            + 5.0 * l1_box(pred_box, gt_box)
            + 2.0 * (1.0 - giou(pred_box, gt_box))
        )
        assert out.total.item() == pytest.approx(manual, abs=1e-12)
        assert out.total.item() == pytest.approx(3.7453, abs=1e-4)

    def test_empty_ground_truth_is_all_negatives(self):
        probs = np.array([[0.3], [0.6]])
        preds = StubPreds(probs, np.full((2, 4), 0.5), n_track=0)
        out = frame_loss(preds, Assignment(), Assignment(), [], W)
        expected = 2.0 * sum(
            0.75 * p**2 * -np.log(1 - p) for p in probs.reshape(-1)
        )
        assert out.total.item() == pytest.approx(expected, abs=1e-12)
        assert out.n_objects == 0

    def test_dead_track_identity_supervised_as_background(self):
        preds = StubPreds([[0.8], [0.2]], np.full((2, 4), 0.5), n_track=2)
        out = frame_loss(preds, Assignment([(0, 1), (1, 2)]), Assignment(), [GtObject(1, Box(0.5, 0.5, 0.5, 0.5))], W)
        # identity 2 vanished: contributes only a negative focal term
        assert out.n_tracked == 1

    def test_detect_pair_with_missing_identity_raises(self):
        preds = StubPreds([[0.8]], np.full((1, 4), 0.5), n_track=0)
        with pytest.raises(ValueError, match="missing identity"):
            frame_loss(preds, Assignment(), Assignment([(0, 9)]), [], W)

    def test_weight_scaling_is_linear(self):
        rng = np.random.default_rng(1)
        preds = StubPreds(
            rng.uniform(0.2, 0.8, (3, 1)), rng.uniform(0.3, 0.7, (3, 4)), n_track=1
        )
        gt = [GtObject(1, Box(0.5, 0.5, 0.2, 0.2)), GtObject(2, Box(0.3, 0.6, 0.1, 0.3))]
        tr, det = Assignment([(0, 1)]), Assignment([(1, 2)])
        base = frame_loss(preds, tr, det, gt, W).total.item()
        c = 3.5
        scaled_w = LossWeights(
            lambda_cls=W.lambda_cls * c, lambda_l1=W.lambda_l1 * c, lambda_giou=W.lambda_giou * c
        )
        scaled = frame_loss(preds, tr, det, gt, scaled_w).total.item()
        assert scaled == pytest.approx(c * base, rel=1e-12)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(2)
        probs = rng.uniform(0.1, 0.9, (5, 1))
        boxes = rng.uniform(0.2, 0.8, (5, 4))
        gt = [GtObject(i, Box(0.5, 0.5, 0.2, 0.2)) for i in (1, 2, 3)]
        preds = StubPreds(probs, boxes, n_track=2)
        tr = Assignment([(0, 1), (1, 2)])
        det = Assignment([(1, 3)])
        base = frame_loss(preds, tr, det, gt, W).total.item()

        # swap the two track slots and permute the detect block
        perm = [1, 0, 4, 2, 3]
        preds_p = StubPreds(probs[perm], boxes[perm], n_track=2)
        tr_p = Assignment([(1, 1), (0, 2)])
        det_p = Assignment([(2, 3)])
        permuted = frame_loss(preds_p, tr_p, det_p, gt, W).total.item()
        assert permuted == pytest.approx(base, abs=1e-12)

    def test_gradient_through_boxes_and_probs(self):
        rng = np.random.default_rng(3)
        probs = Tensor(rng.uniform(0.2, 0.8, (3, 1)))
        boxes = Tensor(rng.uniform(0.3, 0.7, (3, 4)))
        gt = [GtObject(1, Box(0.45, 0.55, 0.2, 0.25)), GtObject(2, Box(0.6, 0.4, 0.15, 0.3))]

        def f(probs, boxes):
            preds = type("P", (), {"class_probs": probs, "boxes": boxes, "n_track": 1})()
            return frame_loss(preds, Assignment([(0, 1)]), Assignment([(1, 2)]), gt, W).total

        assert ad.grad_check(f, [probs, boxes], tol=1e-4).passed


def make_terms(rng):
    return FrameLossTerms(
        track=Tensor(rng.uniform(0, 5)),
        detect=Tensor(rng.uniform(0, 5)),
        n_tracked=int(rng.integers(0, 4)),
        n_newborn=int(rng.integers(0, 3)),
    )


class TestClipAverage:
    def test_single_frame_reduction_is_exact(self):
        terms = FrameLossTerms(track=Tensor(1.25), detect=Tensor(2.5), n_tracked=2, n_newborn=1)
        acc = ClipLossAccumulator()
        acc.add(terms)
        manual = ad.scale(ad.add(terms.track, terms.detect), 1.0 / 3)
        assert clip_average_loss(acc).item() == manual.item()

    def test_two_frame_arithmetic(self):
        acc = ClipLossAccumulator()
        acc.add(FrameLossTerms(Tensor(1.0), Tensor(3.0), 1, 1))
        acc.add(FrameLossTerms(Tensor(4.0), Tensor(2.0), 2, 1))
        assert clip_average_loss(acc).item() == pytest.approx(2.0)

    def test_matches_manual_ratio_on_random_accumulators(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            acc = ClipLossAccumulator()
            for _ in range(int(rng.integers(1, 7))):
                acc.add(make_terms(rng))
            manual = sum(f.total.item() for f in acc.frames) / max(acc.total_objects, 1)
            assert abs(clip_average_loss(acc).item() - manual) < 1e-9

    def test_empty_frames_clamp_denominator(self):
        acc = ClipLossAccumulator()
        acc.add(FrameLossTerms(Tensor(0.7), Tensor(0.3), 0, 0))
        acc.add(FrameLossTerms(Tensor(0.5), Tensor(0.5), 0, 0))
        assert clip_average_loss(acc).item() == pytest.approx(2.0)

    def test_no_frames_rejected(self):
        with pytest.raises(ValueError):
            clip_average_loss(ClipLossAccumulator())


def test_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(lambda_cls=-1.0)
    with pytest.raises(ValueError):
        LossWeights(lambda_cls=0.0, lambda_l1=0.0, lambda_giou=0.0)
