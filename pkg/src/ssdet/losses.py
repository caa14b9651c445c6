"""Detection losses: four-term supervised, classification-only unsupervised, focal."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F
from torchvision.ops import box_iou

from .core import boxes_to_array
from .detector import ProposalOutput, ROIOutput, encode_boxes

FOCAL_EPS = 1e-7


@dataclass
class LossConfig:
    roi_cls_loss: str = "focal"  # or "cross_entropy"
    gamma: float = 2.0
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    roi_pos_iou: float = 0.5
    smooth_l1_beta: float = 1.0 / 9.0
    # optional per-image minibatch sampling; a batch size of 0 uses every
    # anchor/proposal
    rpn_batch: int = 0
    rpn_pos_fraction: float = 0.5
    roi_batch: int = 0
    roi_pos_fraction: float = 0.25

    def validate(self):
        if self.roi_cls_loss not in ("focal", "cross_entropy"):
            raise ValueError(f"roi_cls_loss must be 'focal' or 'cross_entropy', got {self.roi_cls_loss!r}")
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if not 0 <= self.rpn_neg_iou <= self.rpn_pos_iou <= 1:
            raise ValueError("need 0 <= rpn_neg_iou <= rpn_pos_iou <= 1")
        if self.rpn_batch < 0 or self.roi_batch < 0:
            raise ValueError("rpn_batch/roi_batch must be >= 0")
        if not (0 < self.rpn_pos_fraction <= 1 and 0 < self.roi_pos_fraction <= 1):
            raise ValueError("positive fractions must be in (0, 1]")

    @property
    def samples(self) -> bool:
        return self.rpn_batch > 0 or self.roi_batch > 0

    def exhaustive(self) -> "LossConfig":
        """Copy with sampling switched off."""
        return replace(self, rpn_batch=0, roi_batch=0)


@dataclass
class LossBreakdown:
    rpn_cls: torch.Tensor
    rpn_reg: torch.Tensor
    roi_cls: torch.Tensor
    roi_reg: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return self.rpn_cls + self.rpn_reg + self.roi_cls + self.roi_reg

    def as_floats(self) -> dict:
        return {k: float(getattr(self, k).detach())
                for k in ("rpn_cls", "rpn_reg", "roi_cls", "roi_reg", "total")}

    @staticmethod
    def mean(items: list) -> "LossBreakdown":
        n = len(items)
        return LossBreakdown(*(sum(getattr(b, k) for b in items) / n
                               for k in ("rpn_cls", "rpn_reg", "roi_cls", "roi_reg")))


def focal_loss(prob_vector, target_class: int, gamma: float, eps: float = FOCAL_EPS) -> float:
    """-(1 - p_t)^gamma * log(p_t) for one probability vector."""
    probs = np.asarray(prob_vector, dtype=np.float64)
    if not 0 <= target_class < len(probs):
        raise IndexError(f"target class {target_class} out of range for {len(probs)} classes")
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    pt = max(float(probs[target_class]), eps)
    return -((1.0 - pt) ** gamma) * math.log(pt)


def focal_loss_from_logits(logits: torch.Tensor, targets: torch.Tensor, gamma: float,
                           eps: float = FOCAL_EPS) -> torch.Tensor:
    """Mean multi-class focal loss over rows."""
    logpt = F.log_softmax(logits, dim=1).gather(1, targets[:, None]).squeeze(1)
    logpt = logpt.clamp(min=math.log(eps))
    pt = logpt.exp()
    return (-(1.0 - pt) ** gamma * logpt).mean()


def _roi_cls_loss(logits, targets, cfg: LossConfig):
    if len(logits) == 0:
        return logits.sum()
    if cfg.roi_cls_loss == "focal":
        return focal_loss_from_logits(logits, targets, cfg.gamma)
    return F.cross_entropy(logits, targets)


def _gt_tensors(boxes, like: torch.Tensor):
    arr = boxes_to_array(boxes)
    gt_boxes = torch.as_tensor(arr, dtype=like.dtype)
    gt_classes = torch.as_tensor([b.class_id for b in boxes], dtype=torch.long)
    return gt_boxes, gt_classes


def assign_anchors(anchors: torch.Tensor, gt_boxes: torch.Tensor, cfg: LossConfig):
    """Labels 1 / 0 / -1 (ignore) and matched gt index per anchor.

    Besides the IoU thresholds, every gt's highest-IoU anchor(s) are positive
    so that no object is left without a positive anchor.
    """
    n = len(anchors)
    labels = torch.zeros(n, dtype=torch.long)
    matched = torch.zeros(n, dtype=torch.long)
    if len(gt_boxes) == 0:
        return labels, matched
    ious = box_iou(anchors, gt_boxes)
    best, matched = ious.max(dim=1)
    labels[(best >= cfg.rpn_neg_iou) & (best < cfg.rpn_pos_iou)] = -1
    labels[best >= cfg.rpn_pos_iou] = 1
    per_gt_best = ious.max(dim=0).values
    low_quality = ((ious == per_gt_best[None, :]) & (per_gt_best[None, :] > 0)).any(dim=1)
    labels[low_quality] = 1
    return labels, matched


def assign_proposals(proposals: torch.Tensor, gt_boxes: torch.Tensor, gt_classes: torch.Tensor,
                     num_classes: int, cfg: LossConfig):
    """Class target per proposal (background = num_classes) and matched gt index."""
    n = len(proposals)
    if len(gt_boxes) == 0 or n == 0:
        return torch.full((n,), num_classes, dtype=torch.long), torch.zeros(n, dtype=torch.long)
    ious = box_iou(proposals, gt_boxes)
    best, matched = ious.max(dim=1)
    targets = gt_classes[matched].clone()
    targets[best < cfg.roi_pos_iou] = num_classes
    return targets, matched


def _rpn_cls(prop: ProposalOutput, labels: torch.Tensor):
    valid = labels >= 0
    return F.binary_cross_entropy_with_logits(
        prop.objectness_logits[valid], labels[valid].to(prop.objectness_logits.dtype))


def supervised_loss(prop: ProposalOutput, roi: ROIOutput, gt, cfg: LossConfig) -> LossBreakdown:
    """All four terms for one image. Regression terms average over positives."""
    num_classes = roi.class_logits.shape[1] - 1
    gt_boxes, gt_classes = _gt_tensors(gt, prop.objectness_logits)
    labels, matched = assign_anchors(prop.anchors, gt_boxes, cfg)
    rpn_cls = _rpn_cls(prop, labels)
    pos = labels == 1
    if pos.any():
        target = encode_boxes(prop.anchors[pos], gt_boxes[matched[pos]])
        rpn_reg = F.smooth_l1_loss(prop.deltas[pos], target, beta=cfg.smooth_l1_beta,
                                   reduction="sum") / int(pos.sum())
    else:
        rpn_reg = prop.deltas.sum() * 0.0

    targets, rmatched = assign_proposals(roi.proposals, gt_boxes, gt_classes, num_classes, cfg)
    roi_cls = _roi_cls_loss(roi.class_logits, targets, cfg)
    rpos = targets < num_classes
    if rpos.any():
        target = encode_boxes(roi.proposals[rpos], gt_boxes[rmatched[rpos]])
        pred = roi.deltas[rpos, targets[rpos]]
        roi_reg = F.smooth_l1_loss(pred, target, beta=cfg.smooth_l1_beta,
                                   reduction="sum") / int(rpos.sum())
    else:
        roi_reg = roi.deltas.sum() * 0.0
    return LossBreakdown(rpn_cls, rpn_reg, roi_cls, roi_reg)


def unsupervised_loss(prop: ProposalOutput, roi: ROIOutput, pseudo, cfg: LossConfig) -> LossBreakdown:
    """Classification terms only; regression terms are constant zeros."""
    num_classes = roi.class_logits.shape[1] - 1
    gt_boxes, gt_classes = _gt_tensors(pseudo, prop.objectness_logits)
    labels, _ = assign_anchors(prop.anchors, gt_boxes, cfg)
    rpn_cls = _rpn_cls(prop, labels)
    targets, _ = assign_proposals(roi.proposals, gt_boxes, gt_classes, num_classes, cfg)
    roi_cls = _roi_cls_loss(roi.class_logits, targets, cfg)
    zero = torch.zeros((), dtype=rpn_cls.dtype)
    return LossBreakdown(rpn_cls, zero, roi_cls, zero.clone())


# --- batched path -------------------------------------------------------------
# Same assignment rules and per-image normalisation as the functions above,
# evaluated on padded (B, ...) tensors. Per-image results are averaged.

def pad_targets(box_lists, dtype=torch.float32) -> tuple:
    """(B, G, 4) boxes, (B, G) classes and validity mask; padding is a unit box."""
    g = max((len(b) for b in box_lists), default=0)
    g = max(g, 1)
    b = len(box_lists)
    boxes = torch.zeros((b, g, 4), dtype=dtype)
    boxes[..., 2:] = 1.0
    classes = torch.zeros((b, g), dtype=torch.long)
    valid = torch.zeros((b, g), dtype=torch.bool)
    for i, items in enumerate(box_lists):
        if items:
            boxes[i, :len(items)] = torch.as_tensor(boxes_to_array(items), dtype=dtype)
            classes[i, :len(items)] = torch.as_tensor([x.class_id for x in items])
            valid[i, :len(items)] = True
    return boxes, classes, valid


def batched_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """(B, N, 4) x (B, G, 4) -> (B, N, G)."""
    lt = torch.maximum(a[:, :, None, :2], b[:, None, :, :2])
    rb = torch.minimum(a[:, :, None, 2:], b[:, None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    union = area_a[:, :, None] + area_b[:, None, :] - inter
    return torch.where(union > 0, inter / union.clamp(min=1e-12), torch.zeros_like(inter))


def sample_mask(pos, neg, keys, batch: int, pos_fraction: float):
    """Per-row minibatch: up to ``batch*pos_fraction`` positives, negatives fill the rest.

    Which candidates are taken is decided by ascending ``keys`` (uniform
    random numbers). ``batch == 0`` keeps every candidate.
    """
    if batch <= 0:
        return pos | neg
    big = torch.full_like(keys, 2.0)
    rank_p = torch.where(pos, keys, big).argsort(dim=1).argsort(dim=1)
    rank_n = torch.where(neg, keys, big).argsort(dim=1).argsort(dim=1)
    n_pos = pos.sum(dim=1).clamp(max=int(batch * pos_fraction))
    n_neg = (batch - n_pos).clamp(min=0)
    return (pos & (rank_p < n_pos[:, None])) | (neg & (rank_n < n_neg[:, None]))


def _masked_mean(values, mask):
    m = mask.to(values.dtype)
    return (values * m).sum(dim=1) / m.sum(dim=1).clamp(min=1.0)


def batch_detection_loss(obj_logits, rpn_deltas, anchors, roi_boxes, roi_valid, cls_logits,
                         roi_deltas, targets, cfg: LossConfig, regression: bool = True,
                         rng=None) -> LossBreakdown:
    """Mean over images of the per-image loss terms.

    ``targets`` is a list of LabeledBox lists (ground truth or pseudo-labels).
    With ``regression=False`` both regression terms are constant zeros.
    ``rng`` (a numpy Generator) drives minibatch sampling and is required
    when ``cfg`` enables it.
    """
    if cfg.samples and rng is None:
        raise ValueError("loss config samples anchors/proposals but no rng was given")
    dtype = obj_logits.dtype
    b, n = obj_logits.shape
    num_classes = cls_logits.shape[-1] - 1
    gt_boxes, gt_classes, gt_valid = pad_targets(targets, dtype)

    # proposal stage
    anc = anchors.to(dtype)[None].expand(b, n, 4)
    ious = batched_iou(anc, gt_boxes).masked_fill(~gt_valid[:, None, :], -1.0)
    best, matched = ious.max(dim=2)
    labels = torch.zeros((b, n), dtype=torch.long)
    labels[(best >= cfg.rpn_neg_iou) & (best < cfg.rpn_pos_iou)] = -1
    labels[best >= cfg.rpn_pos_iou] = 1
    per_gt_best = ious.max(dim=1).values
    low_q = ((ious == per_gt_best[:, None, :]) & gt_valid[:, None, :]
             & (per_gt_best[:, None, :] > 0)).any(dim=2)
    labels[low_q] = 1
    if cfg.rpn_batch > 0:
        keys = torch.from_numpy(rng.random((b, n))).to(dtype)
        chosen = sample_mask(labels == 1, labels == 0, keys, cfg.rpn_batch, cfg.rpn_pos_fraction)
        labels = torch.where(chosen, labels, torch.full_like(labels, -1))
    valid = labels >= 0
    bce = F.binary_cross_entropy_with_logits(obj_logits, labels.clamp(min=0).to(dtype),
                                             reduction="none")
    rpn_cls = _masked_mean(bce, valid).mean()

    # ROI stage
    rious = batched_iou(roi_boxes.to(dtype), gt_boxes).masked_fill(~gt_valid[:, None, :], -1.0)
    rbest, rmatched = rious.max(dim=2)
    cls_t = torch.gather(gt_classes, 1, rmatched)
    cls_t[rbest < cfg.roi_pos_iou] = num_classes
    if cfg.roi_batch > 0:
        keys = torch.from_numpy(rng.random(roi_valid.shape)).to(dtype)
        fg = roi_valid & (cls_t < num_classes)
        roi_valid = sample_mask(fg, roi_valid & ~fg, keys, cfg.roi_batch, cfg.roi_pos_fraction)
    flat_logits = cls_logits.reshape(-1, num_classes + 1)
    flat_t = cls_t.reshape(-1)
    if cfg.roi_cls_loss == "focal":
        logpt = F.log_softmax(flat_logits, dim=1).gather(1, flat_t[:, None]).squeeze(1)
        logpt = logpt.clamp(min=math.log(FOCAL_EPS))
        per_row = -(1.0 - logpt.exp()) ** cfg.gamma * logpt
    else:
        per_row = F.cross_entropy(flat_logits, flat_t, reduction="none")
    roi_cls = _masked_mean(per_row.view(b, -1), roi_valid).mean()

    if not regression:
        zero = torch.zeros((), dtype=dtype)
        return LossBreakdown(rpn_cls, zero, roi_cls, zero.clone())

    pos = labels == 1
    matched_gt = torch.gather(gt_boxes, 1, matched[..., None].expand(b, n, 4))
    tgt = encode_boxes(anc.reshape(-1, 4), matched_gt.reshape(-1, 4)).view(b, n, 4)
    sl1 = F.smooth_l1_loss(rpn_deltas, tgt, beta=cfg.smooth_l1_beta, reduction="none").sum(dim=2)
    npos = pos.sum(dim=1).clamp(min=1).to(dtype)
    rpn_reg = ((sl1 * pos.to(dtype)).sum(dim=1) / npos).mean()

    rpos = roi_valid & (cls_t < num_classes)
    r = roi_boxes.shape[1]
    rgt = torch.gather(gt_boxes, 1, rmatched[..., None].expand(b, r, 4))
    rtgt = encode_boxes(roi_boxes.to(dtype).reshape(-1, 4), rgt.reshape(-1, 4)).view(b, r, 4)
    cls_idx = cls_t.clamp(max=num_classes - 1)
    pred = torch.gather(roi_deltas, 2, cls_idx[..., None, None].expand(b, r, 1, 4)).squeeze(2)
    rsl1 = F.smooth_l1_loss(pred, rtgt, beta=cfg.smooth_l1_beta, reduction="none").sum(dim=2)
    nrpos = rpos.sum(dim=1).clamp(min=1).to(dtype)
    roi_reg = ((rsl1 * rpos.to(dtype)).sum(dim=1) / nrpos).mean()
    return LossBreakdown(rpn_cls, rpn_reg, roi_cls, roi_reg)
