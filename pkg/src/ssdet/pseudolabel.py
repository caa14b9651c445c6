"""Teacher predictions -> pseudo-labels: class-wise NMS, then a confidence cut."""

from __future__ import annotations

from dataclasses import dataclass, field

from .core import pairwise_iou


@dataclass
class PseudoLabelSet:
    boxes: list = field(default_factory=list)
    source_iteration: int = 0
    delta_used: float = 0.0


def classwise_nms(dets, nms_iou: float) -> list:
    """Greedy NMS run separately per class.

    Survivors come back score-descending; equal scores keep input order.
    """
    if not 0.0 < nms_iou <= 1.0:
        raise ValueError(f"nms_iou must be in (0, 1], got {nms_iou}")
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    ious = pairwise_iou(dets, dets)
    suppressed = [False] * len(dets)
    keep = []
    for pos, i in enumerate(order):
        if suppressed[i]:
            continue
        keep.append(i)
        for j in order[pos + 1:]:
            if not suppressed[j] and dets[j].class_id == dets[i].class_id and ious[i, j] > nms_iou:
                suppressed[j] = True
    return [dets[i] for i in keep]


def confidence_filter(dets, delta: float) -> list:
    if not 0.0 <= delta <= 1.0:
        raise ValueError(f"delta must be in [0, 1], got {delta}")
    return [d for d in dets if d.score >= delta]


def pseudo_labels_from_detections(dets, delta: float, nms_iou: float,
                                  iteration: int = 0) -> PseudoLabelSet:
    return PseudoLabelSet(confidence_filter(classwise_nms(dets, nms_iou), delta),
                          iteration, delta)


def generate_pseudo_labels(detector, teacher, weak_images, delta: float, nms_iou: float,
                           iteration: int = 0) -> list:
    """One PseudoLabelSet per weakly augmented image.

    Inference runs under ``torch.no_grad`` so the teacher never collects
    gradient state.
    """
    # Pre-filtering at delta leaves the result unchanged: greedy NMS only
    # lets a box be suppressed by a higher-scored one, so boxes below delta
    # never remove boxes above it.
    floor = delta if delta < 1.0 else 0.0
    raw = detector.predict(teacher, weak_images, score_floor=floor, nms_iou=nms_iou)
    return [pseudo_labels_from_detections(d, delta, nms_iou, iteration) for d in raw]


def threshold_sweep(detector, teacher, weak_images, deltas, nms_iou: float) -> dict:
    """Mean pseudo boxes per image for each threshold, from one teacher pass."""
    deltas = sorted(float(d) for d in deltas)
    if not deltas:
        return {}
    floor = deltas[0] if deltas[0] < 1.0 else 0.0
    raw = detector.predict(teacher, weak_images, score_floor=floor, nms_iou=nms_iou)
    kept = [classwise_nms(d, nms_iou) for d in raw]
    n = max(len(kept), 1)
    return {d: sum(len(confidence_filter(k, d)) for k in kept) / n for d in deltas}
