"""Default boxes, IoU, and the offset encode/decode."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssdfuse import boxes as B

from oracles import unit_grid_iou

TAP_SIZES_300 = [(38, 38), (19, 19), (10, 10), (5, 5), (3, 3), (1, 1)]


class TestDefaultBoxes:
    def test_total_is_8732(self):
        anchors = B.generate_default_boxes(TAP_SIZES_300)
        assert len(anchors) == 8732

    def test_per_tap_counts(self):
        anchors = B.generate_default_boxes(TAP_SIZES_300)
        counts = [e - s for s, e in anchors.tap_slices]
        assert counts == [5776, 2166, 600, 150, 36, 4]

    def test_first_tap_count_arithmetic(self):
        anchors = B.generate_default_boxes(TAP_SIZES_300)
        assert anchors.tap_slices[0] == (0, 38 * 38 * 4)

    def test_extents_in_unit_interval(self):
        anchors = B.generate_default_boxes(TAP_SIZES_300)
        wh = anchors.boxes_center[:, 2:]
        assert (wh > 0).all() and (wh <= 1).all()
        corners = anchors.boxes_corner
        assert (corners >= 0).all() and (corners <= 1).all()

    def test_centers_at_half_cells(self):
        anchors = B.generate_default_boxes([(2, 2)], scales=[0.5],
                                           boxes_per_cell=[4],
                                           extra_scale_beyond_last=0.6)
        # first cell (row 0, col 0): center (0.25, 0.25) before clamping;
        # the square 0.5 anchor stays inside so its center is exact
        np.testing.assert_allclose(anchors.boxes_center[0, :2], [0.25, 0.25])

    def test_deterministic(self):
        a = B.generate_default_boxes(TAP_SIZES_300)
        b = B.generate_default_boxes(TAP_SIZES_300)
        assert a.boxes_center.tobytes() == b.boxes_center.tobytes()


class TestIoU:
    def test_identical(self):
        assert B.iou((0.1, 0.1, 0.4, 0.5), (0.1, 0.1, 0.4, 0.5)) == 1.0

    def test_disjoint(self):
        assert B.iou((0, 0, 0.2, 0.2), (0.5, 0.5, 0.9, 0.9)) == 0.0

    def test_unit_grid_oracle(self):
        a = (0, 0, 2, 2)
        b = (1, 1, 3, 3)
        assert B.iou(a, b) == pytest.approx(1 / 7)
        assert unit_grid_iou(a, b) == pytest.approx(1 / 7)

    def test_zero_union(self):
        assert B.iou((0.2, 0.2, 0.2, 0.2), (0.2, 0.2, 0.2, 0.2)) == 0.0

    @given(st.lists(st.floats(0, 1), min_size=8, max_size=8))
    @settings(max_examples=100, deadline=None)
    def test_symmetric_and_bounded(self, vals):
        a = np.array([min(vals[0], vals[2]), min(vals[1], vals[3]),
                      max(vals[0], vals[2]), max(vals[1], vals[3])])
        b = np.array([min(vals[4], vals[6]), min(vals[5], vals[7]),
                      max(vals[4], vals[6]), max(vals[5], vals[7])])
        ab = B.iou(a, b)
        assert 0.0 <= ab <= 1.0
        assert ab == B.iou(b, a)


class TestEncodeDecode:
    def test_gt_equals_anchor(self):
        anchor = np.array([0.5, 0.5, 0.2, 0.3])
        gt = B.center_to_corner(anchor)
        np.testing.assert_allclose(B.encode_box(gt, anchor), np.zeros(4),
                                   atol=1e-12)

    def test_roundtrip(self, rng):
        for _ in range(50):
            anchor = np.array([rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7),
                               rng.uniform(0.05, 0.3), rng.uniform(0.05, 0.3)])
            gt_center = np.array([rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7),
                                  rng.uniform(0.05, 0.3), rng.uniform(0.05, 0.3)])
            gt = B.center_to_corner(gt_center)
            again = B.decode_box(B.encode_box(gt, anchor), anchor)
            np.testing.assert_allclose(again, gt, atol=1e-12)

    def test_log_size_component(self):
        anchor = np.array([0.5, 0.5, 0.2, 0.2])
        gt = B.center_to_corner(np.array([0.5, 0.5, 0.2 * np.exp(0.2), 0.2]))
        enc = B.encode_box(gt, anchor)
        assert enc[2] == pytest.approx(1.0, abs=1e-12)
        assert enc[0] == pytest.approx(0.0, abs=1e-9)

    def test_zero_offsets_decode_to_anchor(self):
        anchor = np.array([0.4, 0.6, 0.2, 0.2])
        np.testing.assert_allclose(B.decode_box(np.zeros(4), anchor),
                                   B.center_to_corner(anchor), atol=1e-12)

    def test_decode_clamps(self):
        anchor = np.array([0.9, 0.9, 0.3, 0.3])
        out = B.decode_box(np.array([0.0, 0.0, 20.0, 20.0]), anchor)
        assert (out >= 0).all() and (out <= 1).all()
        assert out[2] >= out[0] and out[3] >= out[1]

    def test_nonpositive_extent_rejected(self):
        with pytest.raises(ValueError, match="non-positive"):
            B.encode_box(np.array([0.5, 0.5, 0.5, 0.5]),
                         np.array([0.5, 0.5, 0.1, 0.1]))

    def test_conversions_exact(self, rng):
        boxes = rng.uniform(0.1, 0.9, size=(20, 4))
        boxes[:, 2:] = boxes[:, :2] + np.abs(boxes[:, 2:]) * 0.1
        again = B.center_to_corner(B.corner_to_center(boxes))
        np.testing.assert_allclose(again, boxes, atol=1e-15)
