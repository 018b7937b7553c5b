"""Training: SGD with warmup + step decay, light augmentation, a seeded
synthetic thermal-style dataset, and the step loop."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import arch as A
from . import boxes as B
from . import data as D
from . import graph as G
from . import matching as M


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    base_lr: float = 4e-3
    warmup_start_lr: float = 1e-6
    warmup_epochs: int = 5
    decay_epochs: tuple[int, int] = (150, 200)
    total_epochs: int = 250
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    augment: bool = True
    crop_prob: float = 0.5
    iou_threshold: float = 0.5
    neg_pos_ratio: int = 3

    def __post_init__(self):
        d = tuple(self.decay_epochs)
        object.__setattr__(self, "decay_epochs", d)
        if not (self.warmup_epochs < d[0] < d[1] < self.total_epochs):
            raise ValueError(
                "need warmup_epochs < first decay < second decay < total_epochs, "
                f"got {self.warmup_epochs} / {d} / {self.total_epochs}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def lr_at(config: TrainConfig, step: int, steps_per_epoch: int) -> float:
    """Learning rate for a global step (0-based).

    Linear per-step warmup from warmup_start_lr at step 0 to base_lr at the
    first step after warmup_epochs, then piecewise constant with a /10 drop
    at each decay epoch boundary.
    """
    warm_steps = config.warmup_epochs * steps_per_epoch
    if step < warm_steps:
        frac = step / warm_steps
        return config.warmup_start_lr + (config.base_lr - config.warmup_start_lr) * frac
    epoch = step // steps_per_epoch
    lr = config.base_lr
    for boundary in config.decay_epochs:
        if epoch >= boundary:
            lr /= 10.0
    return lr


def sgd_step(params: dict, grads: dict, velocity: dict, lr: float,
             momentum: float = 0.9, weight_decay: float = 5e-4) -> None:
    """In-place momentum SGD: v <- mu*v + (g + lambda*theta); theta -= lr*v.

    Weight decay is coupled (added to the gradient) and applies to conv and
    deconv kernels only, never to biases, batch-norm affines, or norm scales.
    """
    for name in params:
        if G.is_buffer(name) or name not in grads:
            continue
        g = grads[name]
        if weight_decay and G.is_kernel_param(name):
            g = g + weight_decay * params[name]
        v = momentum * velocity[name] + g
        velocity[name] = v
        params[name] = params[name] - lr * v


def flip_horizontal(image: np.ndarray, gt_boxes: np.ndarray):
    flipped = image[:, :, ::-1].copy()
    if gt_boxes.size == 0:
        return flipped, gt_boxes.copy()
    out = gt_boxes.copy()
    out[:, 0] = 1.0 - gt_boxes[:, 2]
    out[:, 2] = 1.0 - gt_boxes[:, 0]
    return flipped, out


def random_crop(image: np.ndarray, gt_boxes: np.ndarray, gt_labels: np.ndarray,
                rng: np.random.Generator, attempts: int = 25):
    """Crop a random window keeping at least one gt center; kept boxes are
    clipped to the window and renormalized, and the patch is resized back to
    the source extent. Returns the inputs unchanged if no attempt works."""
    c, h, w = image.shape
    if gt_boxes.size == 0:
        return image, gt_boxes, gt_labels
    centers = (gt_boxes[:, :2] + gt_boxes[:, 2:]) / 2.0
    for _ in range(attempts):
        cw = rng.uniform(0.5, 1.0)
        ch = rng.uniform(0.5, 1.0)
        x0 = rng.uniform(0.0, 1.0 - cw)
        y0 = rng.uniform(0.0, 1.0 - ch)
        keep = ((centers[:, 0] > x0) & (centers[:, 0] < x0 + cw)
                & (centers[:, 1] > y0) & (centers[:, 1] < y0 + ch))
        if not keep.any():
            continue
        px0, px1 = int(round(x0 * w)), int(round((x0 + cw) * w))
        py0, py1 = int(round(y0 * h)), int(round((y0 + ch) * h))
        if px1 - px0 < 2 or py1 - py0 < 2:
            continue
        patch = image[:, py0:py1, px0:px1]
        boxes = gt_boxes[keep].copy()
        fx0, fy0 = px0 / w, py0 / h
        fw, fh = (px1 - px0) / w, (py1 - py0) / h
        boxes[:, [0, 2]] = np.clip((boxes[:, [0, 2]] - fx0) / fw, 0.0, 1.0)
        boxes[:, [1, 3]] = np.clip((boxes[:, [1, 3]] - fy0) / fh, 0.0, 1.0)
        ok = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
        if not ok.any():
            continue
        return (D.resize_bilinear(patch, (h, w)), boxes[ok], gt_labels[keep][ok])
    return image, gt_boxes, gt_labels


def augment(image: np.ndarray, gt_boxes: np.ndarray, gt_labels: np.ndarray,
            rng: np.random.Generator, crop_prob: float = 0.5):
    """Horizontal flip with probability 0.5, then an optional random crop."""
    if rng.random() < 0.5:
        image, gt_boxes = flip_horizontal(image, gt_boxes)
    if rng.random() < crop_prob:
        image, gt_boxes, gt_labels = random_crop(image, gt_boxes, gt_labels, rng)
    return image, gt_boxes, gt_labels


SYNTH_CLASS_NAMES = {1: "rectangle", 2: "ellipse", 3: "triangle"}
SMALL_AREA = 32 * 32


@dataclass(frozen=True)
class SyntheticSpec:
    image_size: int = 300
    channels: int = 1
    num_images: int = 200
    max_objects: int = 5
    small_fraction: float = 0.58   # minimum share of objects under 32x32
    noise_level: float = 0.04
    background: float = 0.25
    brightness: tuple[float, float] = (0.6, 0.95)
    seed: int = 0

    def __post_init__(self):
        lo = self.brightness[0]
        if lo - self.background < 3 * self.noise_level:
            raise ValueError("object brightness must clear the background by "
                             ">= 3 sigma of the noise")
        if self.channels != 1:
            raise ValueError("synthetic generator emits grayscale only")


@dataclass
class SyntheticDataset:
    spec: SyntheticSpec
    images: list[np.ndarray]       # (1, H, W) float64 in [0, 1]
    boxes: list[np.ndarray]        # (G, 4) normalized corners per image
    labels: list[np.ndarray]       # (G,) int64 in 1..3

    @property
    def samples(self):
        return list(zip(self.images, self.boxes, self.labels))

    def small_object_fraction(self) -> float:
        s = self.spec.image_size
        areas = [((b[:, 2] - b[:, 0]) * s) * ((b[:, 3] - b[:, 1]) * s)
                 for b in self.boxes if b.size]
        if not areas:
            return 0.0
        areas = np.concatenate(areas)
        return float((areas < SMALL_AREA).mean())

    def to_dataset(self) -> D.Dataset:
        s = self.spec.image_size
        images, anns = [], []
        ann_id = 1
        for i, (bxs, lbs) in enumerate(zip(self.boxes, self.labels)):
            images.append(D.ImageRec(id=i + 1, file_name=f"synth_{i:05d}.pgm",
                                     width=s, height=s, channels=1))
            for box, lab in zip(bxs, lbs):
                x0, y0, x1, y1 = box * s
                anns.append(D.AnnRec(id=ann_id, image_id=i + 1,
                                     category_id=int(lab),
                                     bbox=(float(x0), float(y0),
                                           float(x1 - x0), float(y1 - y0))))
                ann_id += 1
        cats = [D.CatRec(i, n) for i, n in SYNTH_CLASS_NAMES.items()]
        return D.Dataset(images, anns, cats)

    def write(self, out_dir) -> None:
        import json
        import os
        os.makedirs(out_dir, exist_ok=True)
        ds = self.to_dataset()
        for rec, img in zip(ds.images, self.images):
            D.write_pgm(os.path.join(out_dir, rec.file_name), img[0])
        doc = {
            "images": [{"id": im.id, "file_name": im.file_name, "width": im.width,
                        "height": im.height, "channels": im.channels}
                       for im in ds.images],
            "annotations": [{"id": a.id, "image_id": a.image_id,
                             "category_id": a.category_id,
                             "bbox": list(a.bbox)} for a in ds.annotations],
            "categories": [{"id": c.id, "name": c.name} for c in ds.categories],
        }
        with open(os.path.join(out_dir, "annotations.json"), "w",
                  encoding="utf-8") as fh:
            json.dump(doc, fh, separators=(",", ":"))


def _draw_shape(img: np.ndarray, label: int, x: int, y: int, w: int, h: int,
                value: float) -> None:
    if label == 1:
        img[y:y + h, x:x + w] = value
        return
    yy, xx = np.mgrid[0:h, 0:w]
    if label == 2:
        rx, ry = (w - 1) / 2.0, (h - 1) / 2.0
        mask = (((xx - rx) / max(rx, 0.5)) ** 2
                + ((yy - ry) / max(ry, 0.5)) ** 2) <= 1.0
    else:
        frac = yy / max(h - 1, 1)
        half = frac * (w - 1) / 2.0
        mask = np.abs(xx - (w - 1) / 2.0) <= half
    img[y:y + h, x:x + w][mask] = value


def generate_synthetic(spec: SyntheticSpec) -> SyntheticDataset:
    """Bright geometric shapes on a noisy dark background: rectangles
    (class 1), ellipses (class 2), triangles (class 3). The small-object
    draw probability is set above the required fraction so the realized
    share stays within tolerance."""
    rng = np.random.default_rng(spec.seed)
    s = spec.image_size
    p_small = min(0.95, spec.small_fraction + 0.08)
    images, all_boxes, all_labels = [], [], []
    for _ in range(spec.num_images):
        img = np.clip(spec.background
                      + spec.noise_level * rng.standard_normal((s, s)), 0.0, 1.0)
        n = int(rng.integers(1, spec.max_objects + 1))
        placed: list[tuple[int, int, int, int]] = []
        labels: list[int] = []
        for _ in range(n):
            for _attempt in range(30):
                if rng.random() < p_small:
                    w = int(rng.integers(10, 32))
                    h = int(rng.integers(10, 32))
                else:
                    w = int(rng.integers(40, 111))
                    h = int(rng.integers(40, 111))
                x = int(rng.integers(0, s - w + 1))
                y = int(rng.integers(0, s - h + 1))
                cand = np.array([[x, y, x + w, y + h]], dtype=np.float64)
                if placed:
                    ious = B.iou_matrix(cand, np.array(placed, dtype=np.float64))
                    if ious.max() > 0.2:
                        continue
                label = int(rng.integers(1, 4))
                value = float(rng.uniform(*spec.brightness))
                _draw_shape(img, label, x, y, w, h, value)
                placed.append((x, y, x + w, y + h))
                labels.append(label)
                break
        boxes = np.array(placed, dtype=np.float64).reshape(-1, 4) / s
        images.append(img[None, :, :])
        all_boxes.append(boxes)
        all_labels.append(np.array(labels, dtype=np.int64))
    return SyntheticDataset(spec, images, all_boxes, all_labels)


def train(graph: G.NetworkGraph, params: dict, samples, config: TrainConfig,
          *, max_steps: int | None = None, callback=None,
          callback_every: int = 0):
    """Seeded epoch loop over (image, boxes, labels) samples.

    Per step: assemble a batch from the epoch's shuffled order, forward in
    train mode, per-image multibox loss averaged over the batch, backward,
    momentum-SGD update at the scheduled rate. Returns (params, history)
    where history rows are (step, epoch, lr, loss). An optional callback
    every ``callback_every`` steps can stop training early by returning
    True.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("no training samples")
    anchors = A.anchors_for(graph)
    steps_per_epoch = max(1, math.ceil(len(samples) / config.batch_size))
    total_steps = config.total_epochs * steps_per_epoch
    if max_steps is not None:
        total_steps = min(total_steps, max_steps)
    velocity = {k: np.zeros_like(v) for k, v in params.items()
                if not G.is_buffer(k)}
    aug_rng = np.random.default_rng([config.seed, 1])
    history: list[tuple[int, int, float, float]] = []
    step = 0
    stop = False
    for epoch in range(config.total_epochs):
        order = np.random.default_rng([config.seed, 2, epoch]).permutation(len(samples))
        for start in range(0, len(samples), config.batch_size):
            if step >= total_steps or stop:
                return params, history
            idx = order[start:start + config.batch_size]
            batch = []
            for i in idx:
                img, bxs, lbs = samples[i]
                if config.augment:
                    img, bxs, lbs = augment(img, bxs, lbs, aug_rng,
                                            config.crop_prob)
                batch.append((img, bxs, lbs))
            x = np.stack([b[0] for b in batch], axis=0)
            outs, cache = G.forward(graph, params, x, mode="train",
                                    keep_cache=True,
                                    outputs=[n for pair in A.head_names(graph)
                                             for n in pair])
            conf, loc = A.assemble_predictions(graph, outs)
            nb = len(batch)
            gconf = np.zeros_like(conf)
            gloc = np.zeros_like(loc)
            loss = 0.0
            for bi, (_, bxs, lbs) in enumerate(batch):
                match = M.match_anchors(bxs, lbs, anchors, config.iou_threshold)
                li, gc, gl = M.multibox_loss(conf[bi], loc[bi], match,
                                             config.neg_pos_ratio)
                loss += li
                gconf[bi] = gc / nb
                gloc[bi] = gl / nb
            loss /= nb
            tap_grads = A.scatter_prediction_grads(graph, outs, gconf, gloc)
            pgrads, _ = G.backward(graph, params, cache, tap_grads,
                                   need_input_grad=False)
            lr = lr_at(config, step, steps_per_epoch)
            sgd_step(params, pgrads, velocity, lr, config.momentum,
                     config.weight_decay)
            history.append((step, epoch, lr, loss))
            step += 1
            if callback is not None and callback_every and step % callback_every == 0:
                if callback(step, params):
                    stop = True
    return params, history
