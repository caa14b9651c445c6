"""Box geometry, label types and greedy matching.

Boxes are corner form ``(x_min, y_min, x_max, y_max)`` in continuous pixel
coordinates. Zero-area boxes are legal and have IoU 0 with everything.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates: {coords}")
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"box corners out of order: {coords}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @classmethod
    def from_xywh(cls, x, y, w, h) -> "BBox":
        return cls(float(x), float(y), float(x + w), float(y + h))


@dataclass(frozen=True)
class LabeledBox:
    box: BBox
    class_id: int
    score: float = 1.0

    def __post_init__(self):
        if self.class_id < 0:
            raise ValueError(f"negative class id {self.class_id}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


@dataclass(eq=False)
class ImageSample:
    """One image (H x W x 3, values in [0, 1]) and its annotations.

    ``boxes`` of an unlabeled sample are never read by training code.
    """

    image: np.ndarray
    boxes: list = field(default_factory=list)
    is_labeled: bool = True
    image_id: int = 0

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


@dataclass(eq=False)
class DatasetSplit:
    labeled: list
    unlabeled: list
    class_count: int
    seed: int
    # diagnostics-only ground truth of the unlabeled pool, keyed by image_id
    hidden_gt: dict = field(default_factory=dict)


def boxes_to_array(boxes) -> np.ndarray:
    """Stack BBox / LabeledBox items (or an existing array) into (N, 4) float64."""
    if isinstance(boxes, np.ndarray):
        return boxes.reshape(-1, 4).astype(np.float64, copy=False)
    rows = []
    for b in boxes:
        if isinstance(b, LabeledBox):
            b = b.box
        rows.append(b.as_tuple())
    if not rows:
        return np.zeros((0, 4), dtype=np.float64)
    return np.asarray(rows, dtype=np.float64)


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def pairwise_iou(boxes_a, boxes_b) -> np.ndarray:
    """IoU matrix of shape (len(boxes_a), len(boxes_b))."""
    a = boxes_to_array(boxes_a)
    b = boxes_to_array(boxes_b)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)), dtype=np.float64)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def match_boxes(
    preds: Sequence[LabeledBox], gts: Sequence[LabeledBox], iou_thresh: float
) -> list[tuple[int, Optional[int]]]:
    """Greedy class-agnostic matching in descending prediction-score order.

    Returns ``(pred_index, gt_index or None)`` for every prediction, in the
    order the predictions were visited. Equal scores keep input order.
    """
    if not 0.0 < iou_thresh <= 1.0:
        raise ValueError(f"iou_thresh must be in (0, 1], got {iou_thresh}")
    order = sorted(range(len(preds)), key=lambda i: -preds[i].score)
    ious = pairwise_iou(preds, gts)
    taken = np.zeros(len(gts), dtype=bool)
    result = []
    for i in order:
        best_j, best = None, iou_thresh
        for j in range(len(gts)):
            if not taken[j] and ious[i, j] >= best:
                if best_j is None or ious[i, j] > best:
                    best_j, best = j, ious[i, j]
        if best_j is not None:
            taken[best_j] = True
        result.append((i, best_j))
    return result


def clip_box(b: BBox, width: float, height: float) -> BBox:
    if width <= 0 or height <= 0:
        raise ValueError("width and height must be positive")
    x0 = min(max(b.x_min, 0.0), width)
    y0 = min(max(b.y_min, 0.0), height)
    x1 = min(max(b.x_max, 0.0), width)
    y1 = min(max(b.y_max, 0.0), height)
    return BBox(x0, y0, x1, y1)
