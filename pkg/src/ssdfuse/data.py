"""Annotation ingestion, image loading, and detection/overlay output.

File contracts: a COCO-style JSON subset (images / annotations / categories
arrays, pixel xywh boxes), per-image VOC-style XML, binary portable
graymap/pixmap rasters, a JSON detections array, and an SVG overlay that
references the raster by path.
"""

from __future__ import annotations

import json
import xml.etree.ElementTree as ET
from dataclasses import dataclass

import numpy as np

GRAY_WEIGHTS = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class ImageRec:
    id: int
    file_name: str
    width: int
    height: int
    channels: int = 3


@dataclass(frozen=True)
class AnnRec:
    id: int
    image_id: int
    category_id: int
    bbox: tuple[float, float, float, float]  # x, y, w, h in pixels
    difficult: bool = False

    @property
    def area(self) -> float:
        return self.bbox[2] * self.bbox[3]


@dataclass(frozen=True)
class CatRec:
    id: int
    name: str


@dataclass
class Dataset:
    images: list[ImageRec]
    annotations: list[AnnRec]
    categories: list[CatRec]

    def __post_init__(self):
        self.images = sorted(self.images, key=lambda im: im.id)
        img_ids = {im.id for im in self.images}
        if len(img_ids) != len(self.images):
            raise ValueError("duplicate image ids")
        cat_ids = {c.id for c in self.categories}
        if len(cat_ids) != len(self.categories):
            raise ValueError("duplicate category ids")
        by_id = {im.id: im for im in self.images}
        for a in self.annotations:
            if a.image_id not in img_ids:
                raise ValueError(f"annotation {a.id}: image_id {a.image_id} "
                                 "references no image")
            if a.category_id not in cat_ids:
                raise ValueError(f"annotation {a.id}: category_id {a.category_id} "
                                 "references no category")
            x, y, w, h = a.bbox
            im = by_id[a.image_id]
            if w <= 0 or h <= 0:
                raise ValueError(f"annotation {a.id}: non-positive bbox {a.bbox}")
            if x < 0 or y < 0 or x + w > im.width or y + h > im.height:
                raise ValueError(f"annotation {a.id}: bbox {a.bbox} exceeds "
                                 f"image {im.id} bounds {im.width}x{im.height}")

    def image(self, image_id: int) -> ImageRec:
        for im in self.images:
            if im.id == image_id:
                return im
        raise KeyError(image_id)

    def category(self, cat_id: int) -> CatRec:
        for c in self.categories:
            if c.id == cat_id:
                return c
        raise KeyError(cat_id)

    def anns_for(self, image_id: int) -> list[AnnRec]:
        return [a for a in self.annotations if a.image_id == image_id]


def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise ValueError(f"{where}.{key} missing")
    return obj[key]


def parse_coco_subset(text: str) -> Dataset:
    """Parse the COCO-style JSON subset; unknown fields are ignored."""
    doc = json.loads(text)
    for section in ("images", "annotations", "categories"):
        if section not in doc:
            raise ValueError(f"{section} missing")
        if not isinstance(doc[section], list):
            raise ValueError(f"{section} must be an array")
    images = []
    for i, rec in enumerate(doc["images"]):
        where = f"images[{i}]"
        images.append(ImageRec(
            id=int(_require(rec, "id", where)),
            file_name=str(_require(rec, "file_name", where)),
            width=int(_require(rec, "width", where)),
            height=int(_require(rec, "height", where)),
            channels=int(rec.get("channels", 3))))
    cats = []
    for i, rec in enumerate(doc["categories"]):
        where = f"categories[{i}]"
        cats.append(CatRec(id=int(_require(rec, "id", where)),
                           name=str(_require(rec, "name", where))))
    anns = []
    for i, rec in enumerate(doc["annotations"]):
        where = f"annotations[{i}]"
        bbox = _require(rec, "bbox", where)
        if not isinstance(bbox, list) or len(bbox) != 4:
            raise ValueError(f"{where}.bbox must be [x, y, w, h]")
        anns.append(AnnRec(
            id=int(rec.get("id", i + 1)),
            image_id=int(_require(rec, "image_id", where)),
            category_id=int(_require(rec, "category_id", where)),
            bbox=tuple(float(v) for v in bbox),
            difficult=bool(rec.get("difficult", False))))
    return Dataset(images, anns, cats)


@dataclass(frozen=True)
class VocObject:
    name: str
    bbox: tuple[float, float, float, float]  # 0-based x, y, w, h
    difficult: bool


@dataclass(frozen=True)
class VocImage:
    file_name: str
    width: int
    height: int
    objects: tuple[VocObject, ...]


def parse_voc_xml(text: str) -> VocImage:
    """Parse one VOC-style annotation file. bndbox coordinates are 1-based
    inclusive: xmin=1 maps to x=0 and w = xmax - xmin + 1."""
    try:
        root = ET.fromstring(text)
    except ET.ParseError as e:
        raise ValueError(f"malformed XML: {e}") from e

    def text_of(parent, tag, where):
        node = parent.find(tag)
        if node is None or node.text is None:
            raise ValueError(f"{where}.{tag} missing")
        return node.text.strip()

    size = root.find("size")
    if size is None:
        raise ValueError("size missing")
    width = int(text_of(size, "width", "size"))
    height = int(text_of(size, "height", "size"))
    file_name = root.findtext("filename", default="")
    objects = []
    for i, obj in enumerate(root.findall("object")):
        where = f"object[{i}]"
        name = text_of(obj, "name", where)
        diff = obj.findtext("difficult", default="0").strip() == "1"
        bnd = obj.find("bndbox")
        if bnd is None:
            raise ValueError(f"{where}.bndbox missing")
        xmin = float(text_of(bnd, "xmin", f"{where}.bndbox"))
        ymin = float(text_of(bnd, "ymin", f"{where}.bndbox"))
        xmax = float(text_of(bnd, "xmax", f"{where}.bndbox"))
        ymax = float(text_of(bnd, "ymax", f"{where}.bndbox"))
        if not (1 <= xmin <= xmax <= width and 1 <= ymin <= ymax <= height):
            raise ValueError(f"{where}: bndbox ({xmin},{ymin},{xmax},{ymax}) "
                             f"outside size {width}x{height}")
        objects.append(VocObject(name, (xmin - 1, ymin - 1,
                                        xmax - xmin + 1, ymax - ymin + 1), diff))
    return VocImage(file_name, width, height, tuple(objects))


def _read_pnm_header(data: bytes):
    pos = 0

    def token():
        nonlocal pos
        while pos < len(data):
            if data[pos:pos + 1].isspace():
                pos += 1
            elif data[pos:pos + 1] == b"#":
                while pos < len(data) and data[pos] != 0x0A:
                    pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        return data[start:pos]

    magic = token()
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"unsupported raster magic {magic!r} (want binary P5/P6)")
    width = int(token())
    height = int(token())
    maxval = int(token())
    if maxval not in (255, 65535):
        raise ValueError(f"unsupported maxval {maxval}")
    pos += 1  # single whitespace byte before the raster
    return magic.decode(), width, height, maxval, pos


def load_image(path) -> np.ndarray:
    """Read a binary portable graymap (P5) or pixmap (P6) into a float64
    (C, H, W) array scaled to [0, 1]; 16-bit samples are big-endian."""
    with open(path, "rb") as fh:
        data = fh.read()
    magic, w, h, maxval, off = _read_pnm_header(data)
    channels = 1 if magic == "P5" else 3
    dtype = np.dtype(">u2") if maxval == 65535 else np.dtype("u1")
    count = w * h * channels
    if len(data) - off < count * dtype.itemsize:
        raise ValueError(f"{path}: truncated raster")
    raster = np.frombuffer(data, dtype=dtype, count=count, offset=off)
    img = raster.astype(np.float64).reshape(h, w, channels) / maxval
    return np.ascontiguousarray(img.transpose(2, 0, 1))


def rgb_to_gray(img: np.ndarray) -> np.ndarray:
    """(3, H, W) -> (1, H, W) with the fixed 0.299/0.587/0.114 weights."""
    if img.shape[0] == 1:
        return img
    if img.shape[0] != 3:
        raise ValueError(f"expected 1 or 3 channels, got {img.shape[0]}")
    w = np.asarray(GRAY_WEIGHTS)
    return np.tensordot(w, img, axes=(0, 0))[None, :, :]


def resize_bilinear(img: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Bilinear resample of a (C, H, W) image with half-pixel centers."""
    c, h, w = img.shape
    oh, ow = out_hw
    if oh == h and ow == w:
        return img.copy()
    ys = (np.arange(oh) + 0.5) * h / oh - 0.5
    xs = (np.arange(ow) + 0.5) * w / ow - 0.5
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(np.int64)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)[None, :, None]
    fx = np.clip(xs - x0, 0.0, 1.0)[None, None, :]
    tl = img[:, y0[:, None], x0[None, :]]
    tr = img[:, y0[:, None], x1[None, :]]
    bl = img[:, y1[:, None], x0[None, :]]
    br = img[:, y1[:, None], x1[None, :]]
    top = tl + (tr - tl) * fx
    bot = bl + (br - bl) * fx
    return top + (bot - top) * fy


def load_input(path, size: int, channels: int) -> np.ndarray:
    """Load, convert to the requested channel count, and resize to the
    square network input."""
    img = load_image(path)
    if channels == 1 and img.shape[0] == 3:
        img = rgb_to_gray(img)
    elif channels == 3 and img.shape[0] == 1:
        img = np.repeat(img, 3, axis=0)
    elif img.shape[0] != channels:
        raise ValueError(f"{path}: has {img.shape[0]} channels, need {channels}")
    return resize_bilinear(img, (size, size))


def write_pgm(path, img: np.ndarray) -> None:
    """Write a 2-D array as a binary P5 graymap; floats are taken in [0, 1]."""
    if img.dtype != np.uint8:
        img = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


DETECTION_KEYS = ("image_id", "category_id", "bbox", "score")


def write_detections(dets: list[dict], path) -> None:
    """JSON array of {image_id, category_id, bbox: [x, y, w, h], score}
    records with pixel-space boxes; write -> read -> write is byte-stable."""
    recs = []
    for i, d in enumerate(dets):
        missing = [k for k in DETECTION_KEYS if k not in d]
        if missing:
            raise ValueError(f"detection[{i}] missing {missing}")
        recs.append({"image_id": int(d["image_id"]),
                     "category_id": int(d["category_id"]),
                     "bbox": [float(v) for v in d["bbox"]],
                     "score": float(d["score"])})
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(recs, fh, separators=(",", ":"))


def read_detections(path) -> list[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, list):
        raise ValueError("detections file must be a JSON array")
    for i, d in enumerate(doc):
        missing = [k for k in DETECTION_KEYS if k not in d]
        if missing:
            raise ValueError(f"detection[{i}] missing {missing}")
    return doc


PALETTE = ("#e6194b", "#3cb44b", "#4363d8", "#f58231", "#911eb4", "#46f0f0",
           "#f032e6", "#bcf60c", "#fabebe", "#008080")


def class_color(category_id: int) -> str:
    return PALETTE[category_id % len(PALETTE)]


def render_overlay(image_path: str, image_wh: tuple[int, int], dets: list[dict],
                   score_floor: float = 0.6,
                   category_names: dict[int, str] | None = None) -> str:
    """SVG document with one rectangle and label per detection scoring
    strictly above the floor; the raster is referenced by path, not inlined."""
    w, h = image_wh
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" '
             f'xmlns:xlink="http://www.w3.org/1999/xlink" '
             f'width="{w}" height="{h}">',
             f'<image xlink:href="{image_path}" x="0" y="0" '
             f'width="{w}" height="{h}"/>']
    for d in dets:
        if d["score"] <= score_floor:
            continue
        x, y, bw, bh = d["bbox"]
        color = class_color(int(d["category_id"]))
        name = (category_names or {}).get(int(d["category_id"]),
                                          str(d["category_id"]))
        label = f"{name} {d['score']:.2f}"
        parts.append(f'<rect x="{x:.1f}" y="{y:.1f}" width="{bw:.1f}" '
                     f'height="{bh:.1f}" fill="none" stroke="{color}" '
                     f'stroke-width="2"/>')
        parts.append(f'<text x="{x:.1f}" y="{max(y - 2.0, 10.0):.1f}" '
                     f'fill="{color}" font-size="12">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
