"""Default-box generation, IoU, and the SSD offset encode/decode.

Boxes live in normalized [0, 1] image coordinates, either corner form
(xmin, ymin, xmax, ymax) or center form (cx, cy, w, h). Vectorized
variants operate on (N, 4) arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# SSD-300 convention: per-tap box scales, extra square uses the next scale
ANCHOR_SCALES = (0.1, 0.2, 0.375, 0.55, 0.725, 0.9)
EXTRA_SCALE_BEYOND_LAST = 1.0
# taps 1/5/6 carry 4 boxes per cell (aspects 1, extra square, 2, 1/2);
# taps 2/3/4 add aspects 3 and 1/3 for 6 per cell
BOXES_PER_CELL = (4, 6, 6, 6, 4, 4)
VARIANCES = (0.1, 0.2)


def corner_to_center(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    xmin, ymin, xmax, ymax = np.moveaxis(boxes, -1, 0)
    return np.stack([(xmin + xmax) / 2, (ymin + ymax) / 2,
                     xmax - xmin, ymax - ymin], axis=-1)


def center_to_corner(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    cx, cy, w, h = np.moveaxis(boxes, -1, 0)
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


@dataclass(frozen=True)
class AnchorSet:
    """Ordered default boxes in center form, grouped by source tap.

    Order is (tap, row, column, aspect) lexicographic; ``tap_slices[i]``
    bounds tap i's boxes in the flat array.
    """

    boxes_center: np.ndarray
    tap_sizes: tuple[tuple[int, int], ...]
    boxes_per_cell: tuple[int, ...]

    @property
    def boxes_corner(self) -> np.ndarray:
        return center_to_corner(self.boxes_center)

    @property
    def tap_slices(self) -> tuple[tuple[int, int], ...]:
        out = []
        off = 0
        for (h, w), k in zip(self.tap_sizes, self.boxes_per_cell):
            n = h * w * k
            out.append((off, off + n))
            off += n
        return tuple(out)

    def __len__(self) -> int:
        return self.boxes_center.shape[0]


def generate_default_boxes(tap_sizes,
                           scales=ANCHOR_SCALES,
                           boxes_per_cell=BOXES_PER_CELL,
                           extra_scale_beyond_last=EXTRA_SCALE_BEYOND_LAST) -> AnchorSet:
    """Tile default boxes over each prediction tap.

    tap_sizes: (h, w) spatial extent per tap. Cell (row j, col i) centers at
    ((i + 0.5)/w, (j + 0.5)/h). Boxes are clamped to [0, 1] in corner form.
    """
    if len(tap_sizes) != len(scales) or len(tap_sizes) != len(boxes_per_cell):
        raise ValueError("tap_sizes, scales and boxes_per_cell must align")
    all_scales = list(scales) + [extra_scale_beyond_last]
    chunks = []
    for t, ((fh, fw), k) in enumerate(zip(tap_sizes, boxes_per_cell)):
        s = all_scales[t]
        s_next = all_scales[t + 1]
        shapes = [(s, s), (np.sqrt(s * s_next),) * 2,
                  (s * np.sqrt(2.0), s / np.sqrt(2.0)),
                  (s / np.sqrt(2.0), s * np.sqrt(2.0))]
        if k == 6:
            shapes += [(s * np.sqrt(3.0), s / np.sqrt(3.0)),
                       (s / np.sqrt(3.0), s * np.sqrt(3.0))]
        elif k != 4:
            raise ValueError(f"unsupported boxes-per-cell {k}")
        wh = np.array(shapes)
        cy, cx = np.meshgrid((np.arange(fh) + 0.5) / fh,
                             (np.arange(fw) + 0.5) / fw, indexing="ij")
        centers = np.stack([cx.ravel(), cy.ravel()], axis=1)
        boxes = np.empty((fh * fw, k, 4))
        boxes[:, :, 0:2] = centers[:, None, :]
        boxes[:, :, 2] = wh[None, :, 0]
        boxes[:, :, 3] = wh[None, :, 1]
        chunks.append(boxes.reshape(-1, 4))
    center = np.concatenate(chunks, axis=0)
    clipped = np.clip(center_to_corner(center), 0.0, 1.0)
    return AnchorSet(corner_to_center(clipped), tuple(tuple(t) for t in tap_sizes),
                     tuple(boxes_per_cell))


def iou(a, b) -> float:
    """Intersection over union of two corner-form boxes; 0 when the union
    has zero area."""
    return float(iou_matrix(np.asarray(a)[None, :], np.asarray(b)[None, :])[0, 0])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of corner-form box arrays (N, 4) x (M, 4) -> (N, M)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ix = np.maximum(0.0, np.minimum(a[:, None, 2], b[None, :, 2])
                    - np.maximum(a[:, None, 0], b[None, :, 0]))
    iy = np.maximum(0.0, np.minimum(a[:, None, 3], b[None, :, 3])
                    - np.maximum(a[:, None, 1], b[None, :, 1]))
    inter = ix * iy
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def encode_boxes(gt_corner: np.ndarray, anchors_center: np.ndarray,
                 variances=VARIANCES) -> np.ndarray:
    """SSD offset targets: scaled center deltas and log size ratios."""
    gt = corner_to_center(gt_corner)
    an = np.asarray(anchors_center, dtype=np.float64)
    if np.any(gt[..., 2:] <= 0):
        raise ValueError("encode: ground-truth box has non-positive extent")
    if np.any(an[..., 2:] <= 0):
        raise ValueError("encode: anchor has non-positive extent")
    vc, vs = variances
    out = np.empty_like(gt)
    out[..., 0] = (gt[..., 0] - an[..., 0]) / (an[..., 2] * vc)
    out[..., 1] = (gt[..., 1] - an[..., 1]) / (an[..., 3] * vc)
    out[..., 2] = np.log(gt[..., 2] / an[..., 2]) / vs
    out[..., 3] = np.log(gt[..., 3] / an[..., 3]) / vs
    return out


def decode_boxes(offsets: np.ndarray, anchors_center: np.ndarray,
                 variances=VARIANCES) -> np.ndarray:
    """Inverse of encode_boxes; corner-form output clamped to [0, 1]."""
    off = np.asarray(offsets, dtype=np.float64)
    an = np.asarray(anchors_center, dtype=np.float64)
    vc, vs = variances
    center = np.empty_like(off)
    center[..., 0] = off[..., 0] * vc * an[..., 2] + an[..., 0]
    center[..., 1] = off[..., 1] * vc * an[..., 3] + an[..., 1]
    center[..., 2] = np.exp(off[..., 2] * vs) * an[..., 2]
    center[..., 3] = np.exp(off[..., 3] * vs) * an[..., 3]
    return np.clip(center_to_corner(center), 0.0, 1.0)


def encode_box(gt, anchor, variances=VARIANCES) -> np.ndarray:
    """Single-box encode: gt in corner form, anchor in center form."""
    return encode_boxes(np.asarray(gt)[None, :], np.asarray(anchor)[None, :],
                        variances)[0]


def decode_box(offsets, anchor, variances=VARIANCES) -> np.ndarray:
    return decode_boxes(np.asarray(offsets)[None, :], np.asarray(anchor)[None, :],
                        variances)[0]
