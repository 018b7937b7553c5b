"""Brute-force reference evaluators, written directly from the protocol
prose with plain loops and no shared code with the production module.

Protocol (per category, IoU threshold, area range):
  - a gt is ignored when its area lies outside the range (small < 32^2,
    32^2 itself is medium);
  - detections are ordered per image by descending score (stable), cut to
    maxDets, then globally by (-score, image id, per-image rank);
  - each detection matches the unmatched gt in its image with the highest
    IoU >= threshold, preferring non-ignored gts, earlier gt on ties;
    matching a non-ignored gt = TP, an ignored gt = ignored detection;
  - an unmatched detection is an FP unless its own area is out of range;
  - AP = mean over recall points 0, 0.01, ..., 1 of max precision at
    recall >= point; AR = matched/npos at full depth;
  - categories without ground truth are skipped; all-zero when none has.
"""

import numpy as np


def iou_xywh(a, b):
    ax0, ay0, aw, ah = a
    bx0, by0, bw, bh = b
    ax1, ay1 = ax0 + aw, ay0 + ah
    bx1, by1 = bx0 + bw, by0 + bh
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def _ranked_dets(records, cat, max_dets):
    by_image = {}
    for r in records:
        if r["category_id"] == cat:
            by_image.setdefault(r["image_id"], []).append(r)
    ranked = []
    for img, dets in by_image.items():
        idx = sorted(range(len(dets)), key=lambda i: (-dets[i]["score"], i))
        for rank, i in enumerate(idx[:max_dets]):
            ranked.append((dets[i]["score"], img, rank, dets[i]["bbox"]))
    ranked.sort(key=lambda t: (-t[0], t[1], t[2]))
    return ranked


def _match(ranked, gts_by_image, t, lo, hi):
    taken = {img: [False] * len(anns) for img, anns in gts_by_image.items()}
    npos = 0
    for anns in gts_by_image.values():
        for bbox, difficult in anns:
            area = bbox[2] * bbox[3]
            if lo <= area < hi:
                npos += 1
    flags = []  # 1 = tp, 0 = fp, None = ignored
    for score, img, rank, bbox in ranked:
        anns = gts_by_image.get(img, [])
        best = -1
        best_ign = None
        for gi, (gbox, difficult) in enumerate(anns):
            if taken[img][gi]:
                continue
            v = iou_xywh(bbox, gbox)
            if v < t:
                continue
            area = gbox[2] * gbox[3]
            ign = not (lo <= area < hi)
            if best < 0:
                best, best_iou, best_ign = gi, v, ign
            elif best_ign and not ign:
                best, best_iou, best_ign = gi, v, ign
            elif best_ign == ign and v > best_iou:
                best, best_iou, best_ign = gi, v, ign
        if best >= 0:
            taken[img][best] = True
            flags.append(None if best_ign else 1)
        else:
            area = bbox[2] * bbox[3]
            flags.append(0 if lo <= area < hi else None)
    return flags, npos


def _ap_ar(flags, npos):
    if npos == 0:
        return None, None
    counted = [f for f in flags if f is not None]
    if not counted:
        return 0.0, 0.0
    tps = 0
    fps = 0
    recalls = []
    precisions = []
    for f in counted:
        tps += f == 1
        fps += f == 0
        recalls.append(tps / npos)
        precisions.append(tps / (tps + fps))
    ap = 0.0
    for k in range(101):
        r = k / 100.0
        best = 0.0
        for rec, pre in zip(recalls, precisions):
            if rec >= r and pre > best:
                best = pre
        ap += best
    return ap / 101.0, recalls[-1]


def reference_coco_eval(dataset, records, max_dets=100):
    """Returns the same metric dict shape as EvalReport.to_dict()."""
    thresholds = [round(0.5 + 0.05 * i, 2) for i in range(10)]
    ranges = {"all": (0.0, float("inf")), "small": (0.0, 32.0 ** 2),
              "medium": (32.0 ** 2, 96.0 ** 2), "large": (96.0 ** 2, float("inf"))}
    ap = {}
    ar = {}
    for cat in dataset.categories:
        gts = {}
        for a in dataset.annotations:
            if a.category_id == cat.id:
                gts.setdefault(a.image_id, []).append((a.bbox, a.difficult))
        ranked = _ranked_dets(records, cat.id, max_dets)
        for rname, (lo, hi) in ranges.items():
            for t in thresholds:
                flags, npos = _match(ranked, gts, t, lo, hi)
                ap[(cat.id, t, rname)], ar[(cat.id, t, rname)] = _ap_ar(flags, npos)

    def avg(rname, ts, table):
        vals = [table[(c.id, t, rname)] for c in dataset.categories for t in ts]
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else 0.0

    per_cat = {}
    for c in dataset.categories:
        v = ap[(c.id, 0.5, "all")]
        per_cat[c.name] = 0.0 if v is None else v
    return {"mmAP": avg("all", thresholds, ap),
            "AP50": avg("all", [0.5], ap),
            "AP75": avg("all", [0.75], ap),
            "AP_S": avg("small", thresholds, ap),
            "AP_M": avg("medium", thresholds, ap),
            "AP_L": avg("large", thresholds, ap),
            "AR_S": avg("small", thresholds, ar),
            "AR_M": avg("medium", thresholds, ar),
            "AR_L": avg("large", thresholds, ar),
            "per_category_AP50": per_cat}


def reference_voc_ap(dataset, records, iou_threshold=0.5):
    """11-point VOC AP per class: each detection is checked against its
    single best-IoU gt; difficult gts are excluded from npos and absorb
    their detections silently; duplicates are false positives."""
    per_class = {}
    for cat in dataset.categories:
        gts = {}
        for a in dataset.annotations:
            if a.category_id == cat.id:
                gts.setdefault(a.image_id, []).append(a)
        npos = sum(1 for anns in gts.values() for a in anns if not a.difficult)
        if npos == 0:
            continue
        ranked = _ranked_dets(records, cat.id, max_dets=10 ** 9)
        taken = {img: [False] * len(anns) for img, anns in gts.items()}
        tp = []
        fp = []
        for score, img, rank, bbox in ranked:
            anns = gts.get(img, [])
            if not anns:
                tp.append(0)
                fp.append(1)
                continue
            ious = [iou_xywh(bbox, a.bbox) for a in anns]
            best = max(range(len(anns)), key=lambda i: (ious[i], -i))
            if ious[best] >= iou_threshold:
                if anns[best].difficult:
                    continue
                if not taken[img][best]:
                    taken[img][best] = True
                    tp.append(1)
                    fp.append(0)
                else:
                    tp.append(0)
                    fp.append(1)
            else:
                tp.append(0)
                fp.append(1)
        ap = 0.0
        tps = np.cumsum(tp)
        fps = np.cumsum(fp)
        rec = tps / npos if len(tps) else np.zeros(0)
        pre = tps / np.maximum(tps + fps, 1) if len(tps) else np.zeros(0)
        for k in range(11):
            r = k / 10.0
            mask = rec >= r
            ap += float(pre[mask].max()) if mask.any() else 0.0
        per_class[cat.name] = ap / 11.0
    mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return per_class, mean
