"""Synthetic imbalanced shapes dataset, COCO-format I/O and labeled splits."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .core import BBox, DatasetSplit, ImageSample, LabeledBox, clip_box

DEFAULT_FREQUENCIES = (0.45, 0.25, 0.12, 0.08, 0.06, 0.04)

# Neighbouring classes share similar colours so geometry has to carry
# part of the decision.
_PALETTE = (
    (0.90, 0.25, 0.20),
    (0.90, 0.50, 0.15),
    (0.25, 0.80, 0.30),
    (0.20, 0.70, 0.65),
    (0.25, 0.40, 0.90),
    (0.60, 0.30, 0.85),
    (0.85, 0.85, 0.25),
    (0.85, 0.40, 0.60),
)

SHAPE_NAMES = (
    "square", "disc", "triangle", "plus", "ring", "diamond", "frame", "cross",
)


class DatasetError(ValueError):
    pass


@dataclass
class SyntheticConfig:
    image_size: int = 64
    class_count: int = 6
    class_frequencies: tuple = DEFAULT_FREQUENCIES
    objects_per_image: tuple = (1, 4)
    num_images: int = 1000
    seed: int = 0
    size_range: tuple = (10, 22)
    color_jitter: float = 0.12
    noise_std: float = 0.06

    def validate(self) -> None:
        if self.class_count < 2:
            raise DatasetError("class_count must be at least 2")
        if self.class_count > len(_PALETTE):
            raise DatasetError(f"at most {len(_PALETTE)} shape classes are available")
        freqs = np.asarray(self.class_frequencies, dtype=np.float64)
        if freqs.shape != (self.class_count,):
            raise DatasetError("class_frequencies length must equal class_count")
        if np.any(freqs < 0) or abs(freqs.sum() - 1.0) > 1e-9:
            raise DatasetError("class_frequencies must be nonnegative and sum to 1")
        lo, hi = self.objects_per_image
        if lo < 0 or hi < lo:
            raise DatasetError(f"invalid objects_per_image range {self.objects_per_image}")
        smin, smax = self.size_range
        if not 2 <= smin <= smax <= self.image_size:
            raise DatasetError(f"invalid size_range {self.size_range}")
        if self.num_images < 0:
            raise DatasetError("num_images must be nonnegative")


def _shape_mask(kind: int, h: int, w: int) -> np.ndarray:
    ys = (np.arange(h) + 0.5) / h * 2.0 - 1.0
    xs = (np.arange(w) + 0.5) / w * 2.0 - 1.0
    y, x = np.meshgrid(ys, xs, indexing="ij")
    ax, ay = np.abs(x), np.abs(y)
    r = np.sqrt(x * x + y * y)
    name = SHAPE_NAMES[kind]
    if name == "square":
        return np.ones((h, w), dtype=bool)
    if name == "disc":
        return r <= 1.0
    if name == "triangle":
        return ax <= (y + 1.0) / 2.0
    if name == "plus":
        return (ax <= 0.33) | (ay <= 0.33)
    if name == "ring":
        return (r <= 1.0) & (r >= 0.5)
    if name == "diamond":
        return ax + ay <= 1.0
    if name == "frame":
        return np.maximum(ax, ay) >= 0.55
    return np.abs(ax - ay) <= 0.35  # cross


def _overlaps(box, placed) -> bool:
    x0, y0, x1, y1 = box
    for a0, b0, a1, b1 in placed:
        if x0 < a1 and a0 < x1 and y0 < b1 and b0 < y1:
            return True
    return False


def _render_image(cfg: SyntheticConfig, index: int) -> ImageSample:
    rng = np.random.default_rng([cfg.seed, index])
    size = cfg.image_size
    base = rng.uniform(0.15, 0.45)
    img = base + rng.normal(0.0, cfg.noise_std, size=(size, size, 3))
    n_obj = int(rng.integers(cfg.objects_per_image[0], cfg.objects_per_image[1] + 1))
    classes = rng.choice(cfg.class_count, size=n_obj, p=np.asarray(cfg.class_frequencies))
    placed = []
    boxes = []
    for cls in classes:
        h = int(rng.integers(cfg.size_range[0], cfg.size_range[1] + 1))
        w = int(rng.integers(cfg.size_range[0], cfg.size_range[1] + 1))
        for _ in range(50):
            top = int(rng.integers(0, size - h + 1))
            left = int(rng.integers(0, size - w + 1))
            if not _overlaps((left, top, left + w, top + h), placed):
                break
        mask = _shape_mask(int(cls), h, w)
        rows = np.flatnonzero(mask.any(axis=1))
        cols = np.flatnonzero(mask.any(axis=0))
        color = np.asarray(_PALETTE[cls]) + rng.uniform(-cfg.color_jitter, cfg.color_jitter, 3)
        region = img[top:top + h, left:left + w]
        region[mask] = color + rng.normal(0.0, cfg.noise_std, size=(int(mask.sum()), 3))
        placed.append((left, top, left + w, top + h))
        box = BBox(
            float(left + cols[0]), float(top + rows[0]),
            float(left + cols[-1] + 1), float(top + rows[-1] + 1),
        )
        boxes.append(LabeledBox(box, int(cls), 1.0))
    # quantised to 8 bits so PNG export round-trips exactly
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.float32) / 255.0
    return ImageSample(image=img, boxes=boxes, is_labeled=True, image_id=index)


def generate_synthetic_dataset(cfg: SyntheticConfig) -> list[ImageSample]:
    """Render ``cfg.num_images`` images; image ``i`` depends only on (seed, i)."""
    cfg.validate()
    return [_render_image(cfg, i) for i in range(cfg.num_images)]


def dataset_fingerprint(samples) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(str(s.image_id).encode())
        h.update(np.ascontiguousarray(s.image, dtype=np.float32).tobytes())
        for b in s.boxes:
            h.update(repr((b.box.as_tuple(), b.class_id, b.score)).encode())
    return h.hexdigest()


def class_histogram(box_lists, class_count: int) -> np.ndarray:
    hist = np.zeros(class_count, dtype=np.int64)
    for boxes in box_lists:
        for b in boxes:
            hist[b.class_id] += 1
    return hist


def export_coco(samples, out_dir, class_count: int, class_names=None) -> Path:
    """Write ``annotations.json`` plus one PNG per image under ``out_dir``."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    names = class_names or [SHAPE_NAMES[k] if k < len(SHAPE_NAMES) else f"class_{k}"
                            for k in range(class_count)]
    images, annotations = [], []
    ann_id = 1
    for s in samples:
        fname = f"images/{s.image_id:06d}.png"
        pixels = np.round(np.clip(s.image, 0.0, 1.0) * 255.0).astype(np.uint8)
        Image.fromarray(pixels, mode="RGB").save(out_dir / fname)
        images.append({"id": s.image_id, "file_name": fname,
                       "width": s.width, "height": s.height})
        for b in s.boxes:
            x0, y0, x1, y1 = b.box.as_tuple()
            annotations.append({
                "id": ann_id, "image_id": s.image_id, "category_id": b.class_id + 1,
                "bbox": [x0, y0, x1 - x0, y1 - y0], "area": (x1 - x0) * (y1 - y0),
                "iscrowd": 0,
            })
            ann_id += 1
    doc = {
        "images": images,
        "annotations": annotations,
        "categories": [{"id": k + 1, "name": n} for k, n in enumerate(names)],
    }
    path = out_dir / "annotations.json"
    path.write_text(json.dumps(doc, indent=1))
    return path


def _load_pixels(path: Path) -> np.ndarray:
    if path.suffix == ".npy":
        arr = np.load(path).astype(np.float32)
    else:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    return arr


def load_coco_json(path) -> list[ImageSample]:
    """Read a COCO annotation file; image paths resolve relative to it.

    Category ids are remapped to ``0..C-1`` in ascending id order.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc
    for key in ("images", "annotations", "categories"):
        if not isinstance(doc.get(key), list):
            raise DatasetError(f"{path}: missing or non-list '{key}'")

    cat_ids = []
    for i, cat in enumerate(doc["categories"]):
        if not isinstance(cat, dict) or "id" not in cat:
            raise DatasetError(f"{path}: malformed category record #{i}: {cat!r}")
        cat_ids.append(cat["id"])
    remap = {cid: k for k, cid in enumerate(sorted(cat_ids))}

    images = {}
    order = []
    for i, rec in enumerate(doc["images"]):
        try:
            iid, fname = rec["id"], rec["file_name"]
            width, height = int(rec["width"]), int(rec["height"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{path}: malformed image record #{i}: {rec!r}") from exc
        images[iid] = (fname, width, height)
        order.append(iid)

    boxes = {iid: [] for iid in order}
    for i, ann in enumerate(doc["annotations"]):
        try:
            iid, cid = ann["image_id"], ann["category_id"]
            x, y, w, h = (float(v) for v in ann["bbox"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{path}: malformed annotation record #{i}: {ann!r}") from exc
        if iid not in images:
            raise DatasetError(f"{path}: annotation #{i} references missing image {iid}")
        if cid not in remap:
            raise DatasetError(f"{path}: annotation #{i} references missing category {cid}")
        if w < 0 or h < 0 or not all(math.isfinite(v) for v in (x, y, w, h)):
            raise DatasetError(f"{path}: annotation #{i} has invalid bbox {ann['bbox']!r}")
        _, width, height = images[iid]
        box = clip_box(BBox.from_xywh(x, y, w, h), width, height)
        if box.area <= 0.0:
            continue  # nothing left inside the image, or zero-size to begin with
        boxes[iid].append(LabeledBox(box, remap[cid], 1.0))

    samples = []
    for iid in order:
        fname, width, height = images[iid]
        img_path = path.parent / fname
        try:
            pixels = _load_pixels(img_path)
        except OSError as exc:
            raise DatasetError(f"{path}: cannot load image {iid} from {img_path}: {exc}") from exc
        if pixels.shape[:2] != (height, width):
            raise DatasetError(f"{path}: image {iid} is {pixels.shape[:2]}, record says "
                               f"{(height, width)}")
        samples.append(ImageSample(pixels, boxes[iid], True, int(iid)))
    return samples


def coco_class_count(path) -> int:
    doc = json.loads(Path(path).read_text())
    return len(doc["categories"])


def sample_labeled_split(samples, fraction: float, seed: int,
                         class_count: int | None = None) -> DatasetSplit:
    """Seeded uniform labeled/unlabeled partition.

    Unlabeled samples lose their boxes; the originals go to ``hidden_gt``.
    """
    if not 0.0 < fraction <= 1.0:
        raise DatasetError(f"fraction must be in (0, 1], got {fraction}")
    n = len(samples)
    n_labeled = int(math.floor(fraction * n + 0.5))
    if n_labeled == 0:
        raise DatasetError(f"fraction {fraction} of {n} images leaves no labeled data")
    rng = np.random.default_rng(seed)
    chosen = np.zeros(n, dtype=bool)
    chosen[rng.choice(n, size=n_labeled, replace=False)] = True
    labeled, unlabeled, hidden = [], [], {}
    for s, is_lab in zip(samples, chosen):
        if is_lab:
            labeled.append(ImageSample(s.image, list(s.boxes), True, s.image_id))
        else:
            unlabeled.append(ImageSample(s.image, [], False, s.image_id))
            hidden[s.image_id] = list(s.boxes)
    if class_count is None:
        class_count = 1 + max((b.class_id for s in samples for b in s.boxes), default=1)
    return DatasetSplit(labeled, unlabeled, class_count, seed, hidden)


SWEEP_FRACTIONS = (0.005, 0.01, 0.02, 0.05, 0.10)
