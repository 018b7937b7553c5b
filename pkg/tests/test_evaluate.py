"""NMS, post-processing, and both evaluators (against the brute-force
reference)."""

import numpy as np
import pytest

from ssdfuse import boxes as B
from ssdfuse import data as D
from ssdfuse import evaluate as E

from reference_eval import reference_coco_eval, reference_voc_ap


def make_dataset(n_images=2, cats=(1, 2), size=100, anns=()):
    images = [D.ImageRec(i + 1, f"im{i}.pgm", size, size, 1)
              for i in range(n_images)]
    cat_recs = [D.CatRec(c, f"cat{c}") for c in cats]
    ann_recs = [D.AnnRec(i + 1, img, cat, bbox, diff)
                for i, (img, cat, bbox, diff) in enumerate(anns)]
    return D.Dataset(images, ann_recs, cat_recs)


def det(img, cat, bbox, score):
    return {"image_id": img, "category_id": cat, "bbox": list(bbox),
            "score": score}


class TestNms:
    def test_single_box_kept(self):
        assert E.nms(np.array([[0, 0, 1, 1.0]]), np.array([0.7])) == [0]

    def test_identical_boxes_keep_highest(self):
        boxes = np.array([[0, 0, 1, 1.0], [0, 0, 1, 1.0]])
        assert E.nms(boxes, np.array([0.8, 0.9])) == [1]

    def test_disjoint_all_kept(self):
        boxes = np.array([[0, 0, 0.2, 0.2], [0.5, 0.5, 0.7, 0.7],
                          [0.8, 0.0, 1.0, 0.2]])
        assert sorted(E.nms(boxes, np.array([0.5, 0.9, 0.7]))) == [0, 1, 2]

    def test_idempotent(self, rng):
        boxes = rng.uniform(0, 1, size=(30, 4))
        boxes[:, 2:] = boxes[:, :2] + rng.uniform(0.05, 0.4, size=(30, 2))
        scores = rng.uniform(0, 1, size=30)
        kept = E.nms(boxes, scores)
        again = E.nms(boxes[kept], scores[kept])
        assert again == list(range(len(kept)))

    def test_score_scaling_invariance(self, rng):
        boxes = rng.uniform(0, 1, size=(20, 4))
        boxes[:, 2:] = boxes[:, :2] + rng.uniform(0.05, 0.4, size=(20, 2))
        scores = rng.uniform(0.1, 1, size=20)
        assert E.nms(boxes, scores) == E.nms(boxes, scores * 3.7)

    def test_top_k_cap(self):
        boxes = np.stack([[i * 0.03, 0, i * 0.03 + 0.01, 1.0]
                          for i in range(30)])
        kept = E.nms(boxes, np.linspace(1, 0.1, 30), top_k=5)
        assert len(kept) == 5


class TestPostprocess:
    def _anchors(self):
        return B.generate_default_boxes([(2, 2)], scales=[0.4],
                                        boxes_per_cell=[4],
                                        extra_scale_beyond_last=0.5)

    def test_all_background_empty(self):
        anchors = self._anchors()
        logits = np.zeros((len(anchors), 3))
        logits[:, 0] = 40.0
        dets = E.postprocess(logits, np.zeros((len(anchors), 4)), anchors)
        assert dets == []

    def test_hand_planted_one_hot(self):
        anchors = self._anchors()
        logits = np.zeros((len(anchors), 3))
        logits[:, 0] = 40.0
        logits[5, 0] = 0.0
        logits[5, 2] = 40.0  # class 2 at anchor 5, zero offsets
        dets = E.postprocess(logits, np.zeros((len(anchors), 4)), anchors)
        assert len(dets) == 1
        assert dets[0].category_id == 2
        want = np.clip(B.center_to_corner(anchors.boxes_center[5]), 0, 1)
        np.testing.assert_allclose(dets[0].box, want, atol=1e-12)

    def test_cap_max_per_image(self, rng):
        anchors = self._anchors()
        logits = rng.standard_normal((len(anchors), 3)) * 3
        dets = E.postprocess(logits, np.zeros((len(anchors), 4)), anchors,
                             conf_threshold=0.0, nms_threshold=1.1,
                             max_per_image=7)
        assert len(dets) == 7


class TestCocoEval:
    def test_perfect_single_detection(self):
        ds = make_dataset(anns=[(1, 1, (10, 10, 20, 20), False)])
        recs = [det(1, 1, (10, 10, 20, 20), 0.9)]
        rep = E.coco_eval(ds, recs)
        assert rep.mmap == pytest.approx(1.0)
        assert rep.ap50 == pytest.approx(1.0)

    def test_no_detections_zero(self):
        ds = make_dataset(anns=[(1, 1, (10, 10, 20, 20), False)])
        rep = E.coco_eval(ds, [])
        assert rep.mmap == 0.0 and rep.ap50 == 0.0 and rep.ap75 == 0.0

    def test_unknown_image_rejected(self):
        ds = make_dataset(anns=[(1, 1, (10, 10, 20, 20), False)])
        with pytest.raises(ValueError, match="unknown image_id"):
            E.coco_eval(ds, [det(99, 1, (0, 0, 5, 5), 0.5)])

    def test_unknown_category_rejected(self):
        ds = make_dataset(anns=[(1, 1, (10, 10, 20, 20), False)])
        with pytest.raises(ValueError, match="unknown category_id"):
            E.coco_eval(ds, [det(1, 9, (0, 0, 5, 5), 0.5)])

    def test_area_boundary_exactly_32sq_is_medium(self):
        # a 32x32 gt and matching det: counts for M, not S
        ds = make_dataset(anns=[(1, 1, (0, 0, 32, 32), False)])
        recs = [det(1, 1, (0, 0, 32, 32), 0.9)]
        rep = E.coco_eval(ds, recs)
        assert rep.ap_medium == pytest.approx(1.0)
        assert rep.ap_small == 0.0  # no small gts -> skipped -> 0 overall

    def test_false_positive_never_raises_ap(self, rng):
        ds = make_dataset(anns=[(1, 1, (10, 10, 20, 20), False),
                                (2, 1, (30, 30, 15, 15), False)])
        base = [det(1, 1, (10, 10, 20, 20), 0.9),
                det(2, 1, (30, 30, 15, 15), 0.8)]
        rep0 = E.coco_eval(ds, base)
        for score in (0.95, 0.85, 0.5):
            worse = base + [det(1, 1, (60, 60, 10, 10), score)]
            rep1 = E.coco_eval(ds, worse)
            assert rep1.ap50 <= rep0.ap50 + 1e-12
            assert rep1.mmap <= rep0.mmap + 1e-12

    def test_true_positive_at_top_never_lowers_ap50(self):
        ds = make_dataset(anns=[(1, 1, (10, 10, 20, 20), False),
                                (1, 1, (50, 50, 20, 20), False)])
        partial = [det(1, 1, (10, 10, 20, 20), 0.5),
                   det(1, 1, (70, 10, 8, 8), 0.4)]
        rep0 = E.coco_eval(ds, partial)
        better = partial + [det(1, 1, (50, 50, 20, 20), 0.99)]
        rep1 = E.coco_eval(ds, better)
        assert rep1.ap50 >= rep0.ap50 - 1e-12

    def test_mmap_bounded_by_ap50(self, rng):
        ds, recs = random_instance(rng, 4, 8)
        rep = E.coco_eval(ds, recs)
        assert rep.mmap <= rep.ap50 + 1e-12

    def test_matches_reference_on_edge_cases(self):
        ds = make_dataset(
            n_images=2,
            anns=[(1, 1, (0, 0, 20, 20), False),     # small (400 px)
                  (1, 1, (30, 30, 40, 40), False),   # medium
                  (2, 2, (5, 5, 90, 90), False)])    # large-ish
        recs = [det(1, 1, (0, 0, 20, 20), 0.9),
                det(1, 1, (1, 1, 20, 20), 0.85),     # duplicate
                det(1, 1, (30, 30, 40, 40), 0.8),
                det(2, 2, (5, 5, 90, 90), 0.7),
                det(2, 1, (50, 50, 10, 10), 0.6)]    # fp
        got = E.coco_eval(ds, recs).to_dict()
        want = reference_coco_eval(ds, recs)
        for k in want:
            if k == "per_category_AP50":
                for name in want[k]:
                    assert got[k][name] == pytest.approx(want[k][name], abs=1e-9)
            else:
                assert got[k] == pytest.approx(want[k], abs=1e-9), k

    def test_randomized_against_reference(self, rng):
        for _ in range(12):
            ds, recs = random_instance(rng)
            got = E.coco_eval(ds, recs).to_dict()
            want = reference_coco_eval(ds, recs)
            for k in want:
                if k == "per_category_AP50":
                    continue
                assert got[k] == pytest.approx(want[k], abs=1e-9), k


def random_instance(rng, n_images=None, n_dets=None):
    n_images = n_images or int(rng.integers(1, 6))
    size = 100
    anns = []
    for img in range(1, n_images + 1):
        for _ in range(int(rng.integers(0, 4))):
            cat = int(rng.integers(1, 3))
            w, h = rng.integers(5, 60, size=2)
            x = int(rng.integers(0, size - w))
            y = int(rng.integers(0, size - h))
            anns.append((img, cat, (float(x), float(y), float(w), float(h)),
                         bool(rng.random() < 0.15)))
    ds = make_dataset(n_images=n_images, anns=anns)
    n_dets = n_dets if n_dets is not None else int(rng.integers(0, 11))
    recs = []
    for _ in range(n_dets):
        img = int(rng.integers(1, n_images + 1))
        cat = int(rng.integers(1, 3))
        if anns and rng.random() < 0.6:
            base = anns[int(rng.integers(0, len(anns)))][2]
            jitter = rng.normal(0, 3, size=4)
            bbox = (max(0.0, base[0] + jitter[0]), max(0.0, base[1] + jitter[1]),
                    max(2.0, base[2] + jitter[2]), max(2.0, base[3] + jitter[3]))
        else:
            w, h = rng.integers(5, 50, size=2)
            bbox = (float(rng.integers(0, size - w)),
                    float(rng.integers(0, size - h)), float(w), float(h))
        recs.append(det(img, cat, bbox, float(np.round(rng.uniform(0.05, 1.0), 3))))
    return ds, recs


class TestVocAp:
    def test_perfect_single_detection(self):
        ds = make_dataset(anns=[(1, 1, (10, 10, 20, 20), False)])
        per_class, mean = E.voc_ap(ds, [det(1, 1, (10, 10, 20, 20), 0.9)])
        assert per_class["cat1"] == pytest.approx(1.0)
        assert mean == pytest.approx(1.0)

    def test_fp_above_tp_gives_half(self):
        # 11-point rule: max precision at every recall level is 1/2
        ds = make_dataset(anns=[(1, 1, (10, 10, 20, 20), False)])
        recs = [det(1, 1, (60, 60, 10, 10), 0.9),   # fp, ranked first
                det(1, 1, (10, 10, 20, 20), 0.8)]   # tp
        per_class, _ = E.voc_ap(ds, recs)
        assert per_class["cat1"] == pytest.approx(0.5)

    def test_duplicate_is_fp(self):
        # the duplicate outranks the second gt's detection, so it drags the
        # precision on the high-recall plateau below 1
        ds = make_dataset(anns=[(1, 1, (10, 10, 20, 20), False),
                                (1, 1, (50, 50, 20, 20), False)])
        recs = [det(1, 1, (10, 10, 20, 20), 0.9),
                det(1, 1, (11, 11, 20, 20), 0.85),  # duplicate -> fp
                det(1, 1, (50, 50, 20, 20), 0.8)]
        per_class, _ = E.voc_ap(ds, recs)
        assert per_class["cat1"] == pytest.approx((6 + 5 * 2 / 3) / 11)
        clean, _ = E.voc_ap(ds, [recs[0], recs[2]])
        assert clean["cat1"] == pytest.approx(1.0)
        assert per_class["cat1"] < 1.0

    def test_difficult_excluded(self):
        ds = make_dataset(anns=[(1, 1, (10, 10, 20, 20), False),
                                (1, 1, (50, 50, 20, 20), True)])
        # detection on the difficult gt is silently ignored
        recs = [det(1, 1, (10, 10, 20, 20), 0.9),
                det(1, 1, (50, 50, 20, 20), 0.8)]
        per_class, _ = E.voc_ap(ds, recs)
        assert per_class["cat1"] == pytest.approx(1.0)

    def test_randomized_against_reference(self, rng):
        for _ in range(12):
            ds, recs = random_instance(rng)
            got_pc, got_mean = E.voc_ap(ds, recs)
            want_pc, want_mean = reference_voc_ap(ds, recs)
            assert set(got_pc) == set(want_pc)
            for k in want_pc:
                assert got_pc[k] == pytest.approx(want_pc[k], abs=1e-9)
            assert got_mean == pytest.approx(want_mean, abs=1e-9)
