import numpy as np
import pytest

import querytrack.autodiff as ad
from querytrack.autodiff import Tensor
from querytrack.boxes import Box, box_giou_rows, box_l1_rows, giou, iou, l1_box


def random_box(rng, min_side=0.05, max_side=0.6) -> Box:
    w = float(rng.uniform(min_side, max_side))
    h = float(rng.uniform(min_side, max_side))
    return Box(float(rng.uniform(0, 1)), float(rng.uniform(0, 1)), w, h)


class TestIou:
    def test_self_overlap_is_one(self):
        b = Box(0.3, 0.4, 0.2, 0.1)
        assert iou(b, b) == pytest.approx(1.0)

    def test_disjoint_is_zero(self):
        assert iou(Box(0.1, 0.1, 0.1, 0.1), Box(0.9, 0.9, 0.1, 0.1)) == 0.0

    def test_quarter_offset_value(self):
        a = Box(0.25, 0.25, 0.5, 0.5)
        b = Box(0.5, 0.5, 0.5, 0.5)
        assert iou(a, b) == pytest.approx(1.0 / 7.0, abs=1e-12)

    def test_zero_area_union(self):
        z = Box(0.5, 0.5, 0.0, 0.0)
        assert iou(z, z) == 0.0


class TestGiou:
    def test_self_overlap_is_one(self):
        b = Box(0.3, 0.4, 0.2, 0.1)
        assert giou(b, b) == pytest.approx(1.0)

    def test_far_corners(self):
        a = Box(0.05, 0.05, 0.1, 0.1)
        b = Box(0.95, 0.95, 0.1, 0.1)
        assert giou(a, b) == pytest.approx(-0.98, abs=1e-12)

    def test_quarter_offset_value(self):
        a = Box(0.25, 0.25, 0.5, 0.5)
        b = Box(0.5, 0.5, 0.5, 0.5)
        expected = 1.0 / 7.0 - 0.125 / 0.5625
        assert giou(a, b) == pytest.approx(expected, abs=1e-12)
        assert giou(a, b) == pytest.approx(-0.07937, abs=1e-5)

    def test_bounds_and_dominance(self):
        rng = np.random.default_rng(0)
        for _ in range(300):
            a, b = random_box(rng), random_box(rng)
            g, i = giou(a, b), iou(a, b)
            assert -1.0 <= g <= 1.0
            assert 0.0 <= i <= 1.0
            assert g <= i + 1e-12

    def test_translation_invariance(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            a, b = random_box(rng), random_box(rng)
            dx, dy = rng.uniform(-0.2, 0.2, size=2)
            a2 = Box(a.cx + dx, a.cy + dy, a.w, a.h)
            b2 = Box(b.cx + dx, b.cy + dy, b.w, b.h)
            assert iou(a2, b2) == pytest.approx(iou(a, b), abs=1e-12)
            assert giou(a2, b2) == pytest.approx(giou(a, b), abs=1e-12)


class TestL1:
    def test_identical_boxes(self):
        b = Box(0.5, 0.5, 0.2, 0.2)
        assert l1_box(b, b) == 0.0

    def test_example_value(self):
        assert l1_box(Box(0.5, 0.5, 0.2, 0.2), Box(0.6, 0.5, 0.2, 0.4)) == pytest.approx(0.3)

    def test_symmetry(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            a, b = random_box(rng), random_box(rng)
            assert l1_box(a, b) == pytest.approx(l1_box(b, a), abs=1e-15)


class TestTensorVersions:
    def test_rows_match_float_path(self):
        rng = np.random.default_rng(3)
        boxes_a = [random_box(rng) for _ in range(12)]
        boxes_b = [random_box(rng) for _ in range(12)]
        ta = Tensor(np.stack([b.to_array() for b in boxes_a]))
        tb = Tensor(np.stack([b.to_array() for b in boxes_b]))
        g_rows = box_giou_rows(ta, tb).data.reshape(-1)
        l_rows = box_l1_rows(ta, tb).data.reshape(-1)
        for k, (a, b) in enumerate(zip(boxes_a, boxes_b)):
            assert g_rows[k] == pytest.approx(giou(a, b), abs=1e-12)
            assert l_rows[k] == pytest.approx(l1_box(a, b), abs=1e-12)

    def test_giou_gradient_all_eight_coordinates(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            # keep boxes overlapping-ish and nondegenerate so no kink is hit
            a = np.array([[0.4 + rng.uniform(-0.05, 0.05), 0.5, 0.31, 0.27]])
            b = np.array([[0.5, 0.45 + rng.uniform(-0.05, 0.05), 0.24, 0.33]])
            ta, tb = Tensor(a), Tensor(b)
            report = ad.grad_check(
                lambda x, y: box_giou_rows(x, y).sum(), [ta, tb], tol=1e-4
            )
            assert report.passed, report.max_rel_err

    def test_l1_gradient(self):
        rng = np.random.default_rng(5)
        ta = Tensor(rng.uniform(0.2, 0.8, size=(3, 4)))
        tb = Tensor(rng.uniform(0.2, 0.8, size=(3, 4)))
        assert ad.grad_check(lambda x, y: box_l1_rows(x, y).sum(), [ta, tb]).passed


def test_invalid_boxes_rejected():
    with pytest.raises(ValueError):
        Box(0.5, 0.5, -0.1, 0.2)
    with pytest.raises(ValueError):
        Box(0.5, 0.5, 0.1, 2.5)
