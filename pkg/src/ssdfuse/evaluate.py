"""Detection post-processing and the COCO-style / VOC-style evaluators.

Evaluation protocol (the same rules the brute-force reference in the test
suite implements independently):

Per category, IoU threshold t, and area range R:
  1. A ground truth is *ignored* when its pixel area (bbox w*h) falls
     outside R. Small objects have area < 32^2; 32^2 itself is medium.
  2. Detections are ranked per image by score descending (ties keep input
     order) and truncated to maxDets, then ranked globally by score
     descending with ties broken by image id then per-image rank.
  3. In global rank order each detection matches, within its image, the
     unmatched gt of its category with the highest IoU >= t, preferring
     non-ignored gts (ties: earlier gt). Matching a non-ignored gt makes it
     a true positive; matching an ignored gt makes the detection ignored.
  4. An unmatched detection is a false positive unless its own area is
     outside R, in which case it is ignored.
  5. With npos = non-ignored gt count, AP is the mean over the 101 recall
     points {0, 0.01, ..., 1} of the interpolated precision
     max{p(k): recall(k) >= r} (0 where recall never reaches r). AR is
     matched/npos at full depth. Categories with npos = 0 are skipped by
     the averages; if no category has ground truth, every metric is 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import arch as A
from . import boxes as B
from . import data as D
from . import graph as G

IOU_THRESHOLDS = tuple(np.round(np.arange(0.5, 1.0, 0.05), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
SMALL_MAX = 32.0 ** 2
MEDIUM_MAX = 96.0 ** 2
AREA_RANGES = {"all": (0.0, np.inf), "small": (0.0, SMALL_MAX),
               "medium": (SMALL_MAX, MEDIUM_MAX), "large": (MEDIUM_MAX, np.inf)}


@dataclass(frozen=True)
class Detection:
    category_id: int
    score: float
    box: tuple[float, float, float, float]  # normalized corners


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float = 0.45,
        top_k: int = 200) -> list[int]:
    """Greedy non-maximum suppression over one class.

    Boxes are corner form. Candidates are visited by descending score (ties:
    lower index first); a candidate is dropped when its IoU with any kept box
    exceeds the threshold. Returns kept indices, at most top_k."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    order = np.lexsort((np.arange(scores.size), -scores))
    kept: list[int] = []
    while order.size and len(kept) < top_k:
        i = order[0]
        kept.append(int(i))
        order = order[1:]
        if order.size:
            ious = B.iou_matrix(boxes[i][None, :], boxes[order])[0]
            order = order[ious <= iou_threshold]
    return kept


def postprocess(class_logits: np.ndarray, loc_offsets: np.ndarray,
                anchors: B.AnchorSet, conf_threshold: float = 0.01,
                nms_threshold: float = 0.45,
                max_per_image: int = 200) -> list[Detection]:
    """Turn raw per-anchor predictions into detections: softmax the class
    logits, then per non-background class filter by confidence, decode
    against the anchors, run NMS, and finally keep the top max_per_image
    across classes (ties: lower class id, then candidate order)."""
    from .tensor import softmax

    probs = softmax(class_logits[None, :, :, None], axis=2)[0, :, :, 0]
    decoded = B.decode_boxes(loc_offsets, anchors.boxes_center)
    num_classes = class_logits.shape[1] - 1
    cand_scores, cand_cls, cand_boxes = [], [], []
    for c in range(1, num_classes + 1):
        sc = probs[:, c]
        mask = sc >= conf_threshold
        if not mask.any():
            continue
        bxs = decoded[mask]
        scs = sc[mask]
        for k in nms(bxs, scs, nms_threshold, top_k=max_per_image):
            cand_scores.append(float(scs[k]))
            cand_cls.append(c)
            cand_boxes.append(bxs[k])
    if not cand_scores:
        return []
    order = np.lexsort((np.arange(len(cand_scores)), cand_cls,
                        -np.asarray(cand_scores)))[:max_per_image]
    return [Detection(cand_cls[i], cand_scores[i], tuple(cand_boxes[i]))
            for i in order]


def detect(graph: G.NetworkGraph, params: dict, image: np.ndarray,
           conf_threshold: float = 0.01, nms_threshold: float = 0.45,
           max_per_image: int = 200,
           anchors: B.AnchorSet | None = None) -> list[Detection]:
    """Run the network on one image and post-process its predictions."""
    if image.ndim == 3:
        image = image[None]
    size = int(graph.meta["input_size"])
    if image.shape[2] != size or image.shape[3] != size:
        raise ValueError(f"image extent {image.shape[2:]} does not match the "
                         f"network input {size}x{size}")
    if anchors is None:
        anchors = A.anchors_for(graph)
    outs = G.forward(graph, params, image, mode="infer",
                     outputs=[n for pair in A.head_names(graph) for n in pair])
    conf, loc = A.assemble_predictions(graph, outs)
    return postprocess(conf[0], loc[0], anchors, conf_threshold,
                       nms_threshold, max_per_image)


def detections_to_records(dets: list[Detection], image_id: int,
                          width: int, height: int) -> list[dict]:
    """Convert normalized detections to pixel-space file records using the
    stored image dimensions."""
    recs = []
    for d in dets:
        x0, y0, x1, y1 = d.box
        recs.append({"image_id": int(image_id), "category_id": int(d.category_id),
                     "bbox": [x0 * width, y0 * height,
                              (x1 - x0) * width, (y1 - y0) * height],
                     "score": float(d.score)})
    return recs


@dataclass
class EvalReport:
    mmap: float
    ap50: float
    ap75: float
    ap_small: float
    ap_medium: float
    ap_large: float
    ar_small: float
    ar_medium: float
    ar_large: float
    per_category_ap50: dict[str, float]

    def to_dict(self) -> dict:
        return {"mmAP": self.mmap, "AP50": self.ap50, "AP75": self.ap75,
                "AP_S": self.ap_small, "AP_M": self.ap_medium,
                "AP_L": self.ap_large, "AR_S": self.ar_small,
                "AR_M": self.ar_medium, "AR_L": self.ar_large,
                "per_category_AP50": dict(self.per_category_ap50)}

    def to_text(self) -> str:
        head = (f"{'mmAP':>7} {'AP50':>7} {'AP75':>7} | {'AP_S':>7} {'AP_M':>7} "
                f"{'AP_L':>7} | {'AR_S':>7} {'AR_M':>7} {'AR_L':>7}")
        row = (f"{self.mmap:7.3f} {self.ap50:7.3f} {self.ap75:7.3f} | "
               f"{self.ap_small:7.3f} {self.ap_medium:7.3f} {self.ap_large:7.3f} | "
               f"{self.ar_small:7.3f} {self.ar_medium:7.3f} {self.ar_large:7.3f}")
        lines = [head, row, "", "per-category AP50:"]
        for name in sorted(self.per_category_ap50):
            lines.append(f"  {name:<16} {self.per_category_ap50[name]:7.3f}")
        return "\n".join(lines) + "\n"


def _validate_records(dataset: D.Dataset, records: list[dict]) -> None:
    img_ids = {im.id for im in dataset.images}
    cat_ids = {c.id for c in dataset.categories}
    for i, r in enumerate(records):
        if r["image_id"] not in img_ids:
            raise ValueError(f"detection[{i}]: unknown image_id {r['image_id']}")
        if r["category_id"] not in cat_ids:
            raise ValueError(f"detection[{i}]: unknown category_id {r['category_id']}")


def _rank_dets(records: list[dict], cat: int, max_dets: int):
    """Global ranking per the protocol: per-image truncation to max_dets,
    then (-score, image_id, per-image rank)."""
    per_image: dict[int, list[tuple[float, list]]] = {}
    for r in records:
        if r["category_id"] != cat:
            continue
        per_image.setdefault(r["image_id"], []).append((float(r["score"]),
                                                        list(r["bbox"])))
    ranked = []  # (score, image_id, rank_in_image, box)
    for img in per_image:
        dets = per_image[img]
        order = np.lexsort((np.arange(len(dets)),
                            -np.asarray([d[0] for d in dets])))
        for rank, di in enumerate(order[:max_dets]):
            ranked.append((dets[di][0], img, rank, dets[di][1]))
    ranked.sort(key=lambda t: (-t[0], t[1], t[2]))
    return ranked


def _xywh_to_corners(b) -> np.ndarray:
    return np.array([b[0], b[1], b[0] + b[2], b[1] + b[3]], dtype=np.float64)


def _match_one(ranked, gts, t: float, area_range) -> tuple[np.ndarray, np.ndarray, int]:
    """Run the greedy matching; returns (tp, fp) flags over the ranked dets
    (ignored detections get neither) and npos."""
    lo, hi = area_range
    gt_taken: dict[int, np.ndarray] = {}
    gt_ignored: dict[int, np.ndarray] = {}
    gt_boxes: dict[int, np.ndarray] = {}
    for img, anns in gts.items():
        boxes = np.array([_xywh_to_corners(a[0]) for a in anns]).reshape(-1, 4)
        areas = np.array([a[0][2] * a[0][3] for a in anns])
        gt_boxes[img] = boxes
        gt_ignored[img] = ~((areas >= lo) & (areas < hi))
        gt_taken[img] = np.zeros(len(anns), dtype=bool)
    npos = int(sum((~ig).sum() for ig in gt_ignored.values()))
    tp = np.zeros(len(ranked), dtype=bool)
    fp = np.zeros(len(ranked), dtype=bool)
    for di, (score, img, rank, bbox) in enumerate(ranked):
        boxes = gt_boxes.get(img)
        best = -1
        best_ignored = True
        if boxes is not None and boxes.size:
            ious = B.iou_matrix(_xywh_to_corners(bbox)[None, :], boxes)[0]
            best, best_ignored = _best_candidate(ious, gt_taken[img],
                                                 gt_ignored[img], t)
        if best >= 0:
            gt_taken[img][best] = True
            if not best_ignored:
                tp[di] = True
            # matched-to-ignored detections count as neither tp nor fp
        else:
            area = bbox[2] * bbox[3]
            if lo <= area < hi:
                fp[di] = True
            # out-of-range unmatched detections are ignored
    return tp, fp, npos


def _best_candidate(ious: np.ndarray, taken: np.ndarray, ignored: np.ndarray,
                    t: float) -> tuple[int, bool]:
    best = -1
    for gi in range(ious.shape[0]):
        if taken[gi] or ious[gi] < t:
            continue
        if best < 0:
            best = gi
            continue
        if ignored[best] and not ignored[gi]:
            best = gi
        elif ignored[best] == ignored[gi] and ious[gi] > ious[best]:
            best = gi
    return best, bool(ignored[best]) if best >= 0 else True


def _ap_from_flags(tp: np.ndarray, fp: np.ndarray, npos: int) -> tuple[float, float]:
    """(AP over the 101 recall points, recall at full depth)."""
    keep = tp | fp
    tp = tp[keep]
    fp = fp[keep]
    if npos == 0:
        return float("nan"), float("nan")
    if tp.size == 0:
        return 0.0, 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(fp)
    recall = ctp / npos
    precision = ctp / (ctp + cfp)
    # monotone envelope from the right, then sample the 101 points
    env = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < env.size, env[np.minimum(idx, env.size - 1)], 0.0)
    return float(sampled.mean()), float(recall[-1])


def coco_eval(dataset: D.Dataset, records: list[dict],
              max_dets: int = 100) -> EvalReport:
    """Evaluate pixel-space detection records against a dataset under the
    module's documented protocol."""
    _validate_records(dataset, records)
    cats = [c for c in dataset.categories]
    gts_by_cat: dict[int, dict[int, list]] = {c.id: {} for c in cats}
    for a in dataset.annotations:
        gts_by_cat[a.category_id].setdefault(a.image_id, []).append((a.bbox,))
    ap = {}   # (cat, t, range) -> AP
    ar = {}
    for c in cats:
        gts = gts_by_cat[c.id]
        for rname, rng in AREA_RANGES.items():
            ranked = _rank_dets(records, c.id, max_dets)
            for t in IOU_THRESHOLDS:
                tp, fp, npos = _match_one(ranked, gts, float(t), rng)
                a_val, r_val = _ap_from_flags(tp, fp, npos)
                ap[(c.id, float(t), rname)] = a_val
                ar[(c.id, float(t), rname)] = r_val

    def mean_over(rname: str, thresholds, table) -> float:
        vals = [table[(c.id, float(t), rname)] for c in cats for t in thresholds]
        vals = [v for v in vals if not np.isnan(v)]
        return float(np.mean(vals)) if vals else 0.0

    per_cat_ap50 = {}
    for c in cats:
        v = ap[(c.id, 0.5, "all")]
        per_cat_ap50[c.name] = 0.0 if np.isnan(v) else float(v)
    return EvalReport(
        mmap=mean_over("all", IOU_THRESHOLDS, ap),
        ap50=mean_over("all", [0.5], ap),
        ap75=mean_over("all", [0.75], ap),
        ap_small=mean_over("small", IOU_THRESHOLDS, ap),
        ap_medium=mean_over("medium", IOU_THRESHOLDS, ap),
        ap_large=mean_over("large", IOU_THRESHOLDS, ap),
        ar_small=mean_over("small", IOU_THRESHOLDS, ar),
        ar_medium=mean_over("medium", IOU_THRESHOLDS, ar),
        ar_large=mean_over("large", IOU_THRESHOLDS, ar),
        per_category_ap50=per_cat_ap50)


VOC_RECALL_POINTS = np.linspace(0.0, 1.0, 11)


def voc_ap(dataset: D.Dataset, records: list[dict],
           iou_threshold: float = 0.5) -> tuple[dict[str, float], float]:
    """11-point interpolated AP per category plus the mean.

    Greedy per-detection matching by descending score: a detection is
    checked against the highest-IoU ground truth of its class in its image;
    a duplicate hit on an already-taken gt is a false positive. Ground
    truths flagged difficult are excluded: they do not count toward npos and
    detections whose best match is difficult are ignored."""
    _validate_records(dataset, records)
    per_class: dict[str, float] = {}
    defined = []
    for cat in dataset.categories:
        gts: dict[int, list] = {}
        for a in dataset.annotations:
            if a.category_id == cat.id:
                gts.setdefault(a.image_id, []).append(a)
        npos = sum(1 for anns in gts.values() for a in anns if not a.difficult)
        ranked = _rank_dets(records, cat.id, max_dets=10 ** 9)
        taken: dict[int, np.ndarray] = {img: np.zeros(len(anns), dtype=bool)
                                        for img, anns in gts.items()}
        tp = np.zeros(len(ranked))
        fp = np.zeros(len(ranked))
        for di, (score, img, rank, bbox) in enumerate(ranked):
            anns = gts.get(img, [])
            if not anns:
                fp[di] = 1
                continue
            boxes = np.array([_xywh_to_corners(a.bbox) for a in anns])
            ious = B.iou_matrix(_xywh_to_corners(bbox)[None, :], boxes)[0]
            best = int(np.argmax(ious))
            if ious[best] >= iou_threshold:
                if anns[best].difficult:
                    continue  # ignored
                if not taken[img][best]:
                    taken[img][best] = True
                    tp[di] = 1
                else:
                    fp[di] = 1
            else:
                fp[di] = 1
        if npos == 0:
            continue
        defined.append(cat.name)
        ctp = np.cumsum(tp)
        cfp = np.cumsum(fp)
        recall = ctp / npos
        denom = ctp + cfp
        precision = np.divide(ctp, denom, out=np.zeros_like(ctp), where=denom > 0)
        ap = 0.0
        for r in VOC_RECALL_POINTS:
            mask = recall >= r
            ap += float(precision[mask].max()) if mask.any() else 0.0
        per_class[cat.name] = ap / 11.0
    mean = float(np.mean([per_class[n] for n in defined])) if defined else 0.0
    return per_class, mean
