"""Anchor-to-ground-truth matching, hard negative mining, and the multibox
training loss for one image.

Matching rules: every ground truth is force-matched to an anchor by a
greedy pass over (gt, anchor) pairs in descending IoU (ties resolved to the
lowest anchor index, then lowest gt index); each gt gets a distinct forced
anchor, so a gt whose best anchor is claimed by a stronger gt falls back to
its next-best. Independently, any unforced anchor whose best-gt IoU clears
the threshold becomes positive for that gt. Everything else is background;
background anchors not selected by mining are ignored by the loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import boxes as B


@dataclass
class MatchResult:
    labels: np.ndarray       # (A,) int64: 0 background, 1..C class ids
    gt_index: np.ndarray     # (A,) int64: matched gt per positive, -1 otherwise
    loc_targets: np.ndarray  # (A, 4) encoded offsets, zero for non-positives

    @property
    def positive_mask(self) -> np.ndarray:
        return self.labels > 0

    @property
    def num_positives(self) -> int:
        return int(self.positive_mask.sum())


def match_anchors(gt_boxes: np.ndarray, gt_labels: np.ndarray,
                  anchors: B.AnchorSet | np.ndarray,
                  iou_threshold: float = 0.5,
                  variances=B.VARIANCES) -> MatchResult:
    """gt_boxes: (G, 4) normalized corners; gt_labels: (G,) ints in 1..C."""
    anchors_center = (anchors.boxes_center if isinstance(anchors, B.AnchorSet)
                      else np.asarray(anchors, dtype=np.float64))
    A = anchors_center.shape[0]
    labels = np.zeros(A, dtype=np.int64)
    gt_index = np.full(A, -1, dtype=np.int64)
    loc_targets = np.zeros((A, 4))
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    G = gt_boxes.shape[0]
    if G == 0:
        return MatchResult(labels, gt_index, loc_targets)
    gt_labels = np.asarray(gt_labels, dtype=np.int64).reshape(-1)
    if gt_labels.shape[0] != G or np.any(gt_labels < 1):
        raise ValueError("gt_labels must align with gt_boxes and be >= 1")

    anchors_corner = B.center_to_corner(anchors_center)
    overlaps = B.iou_matrix(gt_boxes, anchors_corner)  # (G, A)

    # forced matches: greedy over the remaining (gt, anchor) pairs; argmax of
    # the row-major flattened matrix picks the lowest gt then anchor on ties
    work = overlaps.copy()
    for _ in range(G):
        flat = int(np.argmax(work))
        g, a = divmod(flat, A)
        if work[g, a] < 0:
            break
        labels[a] = gt_labels[g]
        gt_index[a] = g
        work[g, :] = -1.0
        work[:, a] = -1.0

    forced = gt_index >= 0
    best_gt = np.argmax(overlaps, axis=0)
    best_iou = overlaps[best_gt, np.arange(A)]
    thresholded = (~forced) & (best_iou >= iou_threshold)
    labels[thresholded] = gt_labels[best_gt[thresholded]]
    gt_index[thresholded] = best_gt[thresholded]

    pos = gt_index >= 0
    loc_targets[pos] = B.encode_boxes(gt_boxes[gt_index[pos]],
                                      anchors_center[pos], variances)
    return MatchResult(labels, gt_index, loc_targets)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def hard_negative_mine(conf_logits: np.ndarray, match: MatchResult,
                       neg_pos_ratio: int = 3) -> np.ndarray:
    """Keep the 3x-positives hardest background anchors, ranked by their
    background-class cross-entropy descending (ties to the lower anchor
    index). Returns a boolean keep mask over all anchors."""
    bg = match.labels == 0
    keep = np.zeros(match.labels.shape[0], dtype=bool)
    budget = neg_pos_ratio * match.num_positives
    if budget == 0 or not bg.any():
        return keep
    bg_idx = np.flatnonzero(bg)
    loss = -_log_softmax(conf_logits[bg_idx])[:, 0]
    order = np.lexsort((bg_idx, -loss))
    keep[bg_idx[order[:min(budget, bg_idx.size)]]] = True
    return keep


def multibox_loss(class_logits: np.ndarray, loc_preds: np.ndarray,
                  match: MatchResult, neg_pos_ratio: int = 3,
                  neg_mask: np.ndarray | None = None):
    """Per-image loss (1/N)(L_conf + L_loc) with N = positive count.

    L_conf is softmax cross-entropy over positives plus mined negatives;
    L_loc sums smooth-L1 over the positives' four offset components. With
    no positives the loss and gradients are zero. Returns
    (loss, grad_logits, grad_locs).

    ``neg_mask`` overrides mining with a fixed negative selection; finite
    difference harnesses need this because re-mining at perturbed logits
    makes the loss only piecewise smooth.
    """
    from .tensor import smooth_l1, smooth_l1_grad

    class_logits = np.asarray(class_logits, dtype=np.float64)
    loc_preds = np.asarray(loc_preds, dtype=np.float64)
    grad_logits = np.zeros_like(class_logits)
    grad_locs = np.zeros_like(loc_preds)
    n = match.num_positives
    if n == 0:
        return 0.0, grad_logits, grad_locs

    pos = match.positive_mask
    neg = (hard_negative_mine(class_logits, match, neg_pos_ratio)
           if neg_mask is None else neg_mask)
    sel = pos | neg
    sel_idx = np.flatnonzero(sel)
    targets = match.labels[sel_idx]
    logp = _log_softmax(class_logits[sel_idx])
    l_conf = -logp[np.arange(sel_idx.size), targets].sum()
    probs = np.exp(logp)
    probs[np.arange(sel_idx.size), targets] -= 1.0
    grad_logits[sel_idx] = probs / n

    diff = loc_preds[pos] - match.loc_targets[pos]
    l_loc = smooth_l1(diff).sum()
    grad_locs[pos] = smooth_l1_grad(diff) / n

    return float((l_conf + l_loc) / n), grad_logits, grad_locs
