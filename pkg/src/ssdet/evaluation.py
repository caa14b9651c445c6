"""COCO-style AP50:95, pseudo-label quality, and class-distribution KL."""

from __future__ import annotations

from collections import namedtuple
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .core import iou, match_boxes

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))


@dataclass
class EvalReport:
    ap_per_threshold: list  # one entry per IOU_THRESHOLDS value, None if undefined
    mAP: Optional[float]
    per_class_ap: dict = field(default_factory=dict)

    @property
    def ap50(self):
        return self.ap_per_threshold[0]

    def to_dict(self) -> dict:
        return {"ap_per_threshold": {str(t): v for t, v in zip(IOU_THRESHOLDS, self.ap_per_threshold)},
                "mAP": self.mAP,
                "per_class_ap": {str(k): v for k, v in sorted(self.per_class_ap.items())}}


@dataclass
class PseudoDiagnostics:
    accuracy: float
    miou: float
    boxes_per_image: float
    class_histogram: list
    empty: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


PseudoQuality = namedtuple("PseudoQuality", "accuracy miou empty")


def _all_point_ap(tp: np.ndarray, n_gt: int) -> float:
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    mrec = np.concatenate([[0.0], recall])
    mpre = np.concatenate([[0.0], precision])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def per_class_average_precision(preds, gts, iou_thresh: float) -> dict:
    """AP for every class that has at least one ground-truth instance."""
    if not 0.0 < iou_thresh <= 1.0:
        raise ValueError(f"iou_thresh must be in (0, 1], got {iou_thresh}")
    classes = sorted({b.class_id for boxes in gts for b in boxes})
    out = {}
    for c in classes:
        scored = []  # (score, tp)
        n_gt = 0
        for img_preds, img_gts in zip(preds, gts):
            p_c = [p for p in img_preds if p.class_id == c]
            g_c = [g for g in img_gts if g.class_id == c]
            n_gt += len(g_c)
            for i, j in match_boxes(p_c, g_c, iou_thresh):
                scored.append((p_c[i].score, j is not None))
        scored.sort(key=lambda st: -st[0])
        tp = np.array([t for _, t in scored], dtype=np.float64)
        out[c] = _all_point_ap(tp, n_gt)
    return out


def average_precision(preds, gts, iou_thresh: float) -> Optional[float]:
    """Macro-averaged AP over classes present in ``gts``; None when there are none."""
    per_class = per_class_average_precision(preds, gts, iou_thresh)
    if not per_class:
        return None
    return float(np.mean(list(per_class.values())))


def map_50_95(preds, gts) -> EvalReport:
    per_t = [per_class_average_precision(preds, gts, t) for t in IOU_THRESHOLDS]
    if not per_t[0]:
        return EvalReport([None] * len(IOU_THRESHOLDS), None, {})
    ap_t = [float(np.mean(list(d.values()))) for d in per_t]
    per_class = {c: float(np.mean([d[c] for d in per_t])) for c in per_t[0]}
    return EvalReport(ap_t, float(np.mean(ap_t)), per_class)


def pseudo_accuracy_miou(pseudo, gt_hidden, match_iou: float = 0.5) -> PseudoQuality:
    """Fraction of pseudo boxes matched to a same-class gt, and mean IoU of matches."""
    boxes = getattr(pseudo, "boxes", pseudo)
    if not boxes:
        return PseudoQuality(0.0, 0.0, True)
    correct, ious = _match_counts(boxes, gt_hidden, match_iou)
    miou = float(np.mean(ious)) if ious else 0.0
    return PseudoQuality(correct / len(boxes), miou, False)


def _match_counts(boxes, gts, match_iou):
    correct, ious = 0, []
    for i, j in match_boxes(boxes, gts, match_iou):
        if j is None:
            continue
        ious.append(iou(boxes[i].box, gts[j].box))
        if boxes[i].class_id == gts[j].class_id:
            correct += 1
    return correct, ious


def pseudo_diagnostics(pseudo_sets, gt_sets, class_count: int,
                       match_iou: float = 0.5) -> PseudoDiagnostics:
    """Pooled quality over many images."""
    total, correct, ious = 0, 0, []
    hist = np.zeros(class_count, dtype=np.int64)
    for pseudo, gts in zip(pseudo_sets, gt_sets):
        boxes = getattr(pseudo, "boxes", pseudo)
        total += len(boxes)
        for b in boxes:
            hist[b.class_id] += 1
        c, i = _match_counts(boxes, gts, match_iou)
        correct += c
        ious += i
    n_img = max(len(gt_sets), 1)
    return PseudoDiagnostics(
        accuracy=correct / total if total else 0.0,
        miou=float(np.mean(ious)) if ious else 0.0,
        boxes_per_image=total / n_img,
        class_histogram=hist.tolist(),
        empty=total == 0,
    )


def class_histogram_kl(pseudo_hist, gt_hist, epsilon: float = 1e-6,
                       direction: str = "gt_pseudo") -> float:
    """KL divergence between epsilon-smoothed class histograms.

    ``direction="gt_pseudo"`` gives KL(gt || pseudo); ``"pseudo_gt"`` swaps.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    p_gt = np.asarray(gt_hist, dtype=np.float64) + epsilon
    p_ps = np.asarray(pseudo_hist, dtype=np.float64) + epsilon
    if p_gt.shape != p_ps.shape:
        raise ValueError("histograms must have equal length")
    if np.sum(gt_hist) < 1:
        raise ValueError("ground-truth histogram is empty")
    p_gt /= p_gt.sum()
    p_ps /= p_ps.sum()
    if direction == "pseudo_gt":
        p_gt, p_ps = p_ps, p_gt
    elif direction != "gt_pseudo":
        raise ValueError(f"unknown KL direction {direction!r}")
    return float(max(np.sum(p_gt * np.log(p_gt / p_ps)), 0.0))


@dataclass
class TrainingSeries:
    iterations: list
    teacher_mAP: list
    student_mAP: list
    accuracy: list
    miou: list
    boxes_per_image: list
    gt_boxes_per_image: list
    kl: list
    class_histograms: list
    gt_class_histogram: Optional[list]
    burn_in_limit: Optional[dict]
    gaps: list

    def burn_in_curve(self, key: str) -> list:
        """The frozen post-burn-in value of ``key`` repeated at every point."""
        if self.burn_in_limit is None:
            return [None] * len(self.iterations)
        return [self.burn_in_limit.get(key)] * len(self.iterations)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["burn_in_accuracy"] = self.burn_in_curve("accuracy")
        d["burn_in_miou"] = self.burn_in_curve("miou")
        d["burn_in_boxes_per_image"] = self.burn_in_curve("boxes_per_image")
        return d


def diagnostics_over_training(records) -> TrainingSeries:
    """Assemble per-evaluation time series from metric-log records.

    Evaluation records lacking pseudo diagnostics (e.g. supervised-only runs
    or truncated logs) keep their slot with ``None`` values and are listed in
    ``gaps``.
    """
    evals = [r for r in records if r.get("kind") == "eval"]
    limit = next((r for r in records if r.get("kind") == "burn_in_limit"), None)
    s = TrainingSeries([], [], [], [], [], [], [], [], [], None,
                       dict(limit["pseudo"]) if limit and limit.get("pseudo") else None, [])
    for r in evals:
        s.iterations.append(r["iteration"])
        s.teacher_mAP.append(r.get("teacher_mAP"))
        s.student_mAP.append(r.get("student_mAP"))
        p = r.get("pseudo")
        if not p:
            s.gaps.append(r["iteration"])
            p = {}
        s.accuracy.append(p.get("accuracy"))
        s.miou.append(p.get("miou"))
        s.boxes_per_image.append(p.get("boxes_per_image"))
        s.gt_boxes_per_image.append(p.get("gt_boxes_per_image"))
        s.kl.append(p.get("kl"))
        s.class_histograms.append(p.get("class_histogram"))
        if p.get("gt_class_histogram") is not None:
            s.gt_class_histogram = p["gt_class_histogram"]
    return s

