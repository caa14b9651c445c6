"""Toy two-stage detector evaluated functionally over a flat parameter vector.

The proposal stage scores a single-scale, three-aspect anchor grid on the
last feature map (binary objectness + box deltas). The ROI stage pools each
proposal and predicts C foreground classes plus background (index C) and
class-specific box deltas.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torchvision.ops import nms

from .core import BBox, LabeledBox

BBOX_CLAMP = math.log(1000.0 / 16)

# Parameters that only feed box regression outputs.
REGRESSION_PARAMS = ("rpn.deltas.weight", "rpn.deltas.bias", "roi.deltas.weight", "roi.deltas.bias")


class ArchitectureError(ValueError):
    pass


@dataclass(frozen=True)
class DetectorConfig:
    image_size: int = 64
    num_classes: int = 6
    channels: tuple = (16, 32, 32)
    head_channels: int = 32
    anchor_size: float = 16.0
    aspect_ratios: tuple = (0.5, 1.0, 2.0)
    proposal_nms_iou: float = 0.7
    pre_nms_topk: int = 64
    num_proposals: int = 50
    pool_size: int = 4
    roi_hidden: int = 128

    @property
    def stride(self) -> int:
        return 2 ** len(self.channels)

    @property
    def feature_size(self) -> int:
        return self.image_size // self.stride

    @property
    def num_anchors_per_cell(self) -> int:
        return len(self.aspect_ratios)

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        d = dict(d)
        for k in ("channels", "aspect_ratios"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass(frozen=True)
class ParamLayout:
    entries: tuple  # (name, offset, shape)

    @property
    def size(self) -> int:
        if not self.entries:
            return 0
        name, off, shape = self.entries[-1]
        return off + math.prod(shape)

    def slice_of(self, name: str) -> slice:
        for n, off, shape in self.entries:
            if n == name:
                return slice(off, off + math.prod(shape))
        raise KeyError(name)

    def to_list(self) -> list:
        return [[n, off, list(shape)] for n, off, shape in self.entries]

    @classmethod
    def from_list(cls, items) -> "ParamLayout":
        return cls(tuple((str(n), int(off), tuple(int(s) for s in shape)) for n, off, shape in items))


class ParamVector:
    """A flat 1-D tensor plus the layout that names its pieces."""

    def __init__(self, values: torch.Tensor, layout: ParamLayout):
        if values.dim() != 1 or values.numel() != layout.size:
            raise ArchitectureError(
                f"parameter vector of {values.numel()} values does not match layout size {layout.size}")
        self.values = values
        self.layout = layout

    def views(self) -> dict:
        return {n: self.values[off:off + math.prod(shape)].view(shape)
                for n, off, shape in self.layout.entries}

    def is_finite(self) -> bool:
        return bool(torch.isfinite(self.values).all())

    def __repr__(self):
        return f"ParamVector(size={self.values.numel()}, dtype={self.values.dtype})"


def clone_params(params: ParamVector) -> ParamVector:
    return ParamVector(params.values.detach().clone(), params.layout)


def build_layout(cfg: DetectorConfig) -> ParamLayout:
    shapes = []
    c_in = 3
    for i, c_out in enumerate(cfg.channels):
        shapes.append((f"backbone.conv{i}.weight", (c_out, c_in, 3, 3)))
        shapes.append((f"backbone.conv{i}.bias", (c_out,)))
        c_in = c_out
    a = cfg.num_anchors_per_cell
    hc = cfg.head_channels
    shapes += [
        ("rpn.conv.weight", (hc, c_in, 3, 3)),
        ("rpn.conv.bias", (hc,)),
        ("rpn.objectness.weight", (a, hc, 1, 1)),
        ("rpn.objectness.bias", (a,)),
        ("rpn.deltas.weight", (4 * a, hc, 1, 1)),
        ("rpn.deltas.bias", (4 * a,)),
        ("roi.fc.weight", (cfg.roi_hidden, c_in * cfg.pool_size ** 2)),
        ("roi.fc.bias", (cfg.roi_hidden,)),
        ("roi.cls.weight", (cfg.num_classes + 1, cfg.roi_hidden)),
        ("roi.cls.bias", (cfg.num_classes + 1,)),
        ("roi.deltas.weight", (4 * cfg.num_classes, cfg.roi_hidden)),
        ("roi.deltas.bias", (4 * cfg.num_classes,)),
    ]
    entries, off = [], 0
    for name, shape in shapes:
        entries.append((name, off, shape))
        off += math.prod(shape)
    return ParamLayout(tuple(entries))


# --- box coding -----------------------------------------------------------

def encode_boxes(src: torch.Tensor, dst: torch.Tensor) -> torch.Tensor:
    """Deltas (dx, dy, log dw, log dh) taking ``src`` boxes to ``dst`` boxes."""
    sw = src[:, 2] - src[:, 0]
    sh = src[:, 3] - src[:, 1]
    sx = src[:, 0] + 0.5 * sw
    sy = src[:, 1] + 0.5 * sh
    dw = dst[:, 2] - dst[:, 0]
    dh = dst[:, 3] - dst[:, 1]
    dx = dst[:, 0] + 0.5 * dw
    dy = dst[:, 1] + 0.5 * dh
    return torch.stack([(dx - sx) / sw, (dy - sy) / sh,
                        torch.log(dw / sw), torch.log(dh / sh)], dim=1)


def decode_boxes(deltas: torch.Tensor, src: torch.Tensor) -> torch.Tensor:
    sw = src[:, 2] - src[:, 0]
    sh = src[:, 3] - src[:, 1]
    sx = src[:, 0] + 0.5 * sw
    sy = src[:, 1] + 0.5 * sh
    dx, dy = deltas[:, 0], deltas[:, 1]
    dw = deltas[:, 2].clamp(max=BBOX_CLAMP)
    dh = deltas[:, 3].clamp(max=BBOX_CLAMP)
    cx = sx + dx * sw
    cy = sy + dy * sh
    w = sw * torch.exp(dw)
    h = sh * torch.exp(dh)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=1)


def clip_boxes_(boxes: torch.Tensor, size: float) -> torch.Tensor:
    return boxes.clamp_(0.0, float(size))


def make_anchors(cfg: DetectorConfig, dtype=torch.float32) -> torch.Tensor:
    """(H*W*A, 4) anchors ordered row-major over cells, then aspect ratio."""
    fs, s = cfg.feature_size, cfg.stride
    rows = []
    for i in range(fs):
        for j in range(fs):
            cx, cy = (j + 0.5) * s, (i + 0.5) * s
            for r in cfg.aspect_ratios:
                w = cfg.anchor_size / math.sqrt(r)
                h = cfg.anchor_size * math.sqrt(r)
                rows.append((cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2))
    return torch.tensor(rows, dtype=dtype)


# --- outputs ----------------------------------------------------------------

@dataclass
class ProposalOutput:
    objectness_logits: torch.Tensor  # (N,)
    deltas: torch.Tensor  # (N, 4)
    anchors: torch.Tensor  # (N, 4)

    @property
    def objectness(self) -> torch.Tensor:
        return torch.sigmoid(self.objectness_logits)


@dataclass
class ROIOutput:
    proposals: torch.Tensor  # (R, 4)
    class_logits: torch.Tensor  # (R, C + 1), background last
    deltas: torch.Tensor  # (R, C, 4)

    @property
    def probs(self) -> torch.Tensor:
        return torch.softmax(self.class_logits, dim=1)


def _bilinear_weights(lo: torch.Tensor, hi: torch.Tensor, bins: int, size: int,
                      samples: int) -> torch.Tensor:
    """(R, bins, size) averaged bilinear weights along one axis.

    ``lo``/``hi`` are ROI edges in feature-cell units; each bin averages
    ``samples`` evenly spaced points, clamped to the feature map.
    """
    step = (hi - lo) / bins
    offs = (torch.arange(bins * samples, dtype=lo.dtype) + 0.5) / samples
    pts = lo[:, None] + offs[None, :] * step[:, None] - 0.5
    pts = pts.clamp(0.0, size - 1.0)
    grid = torch.arange(size, dtype=lo.dtype)
    w = (1.0 - (pts[:, :, None] - grid[None, None, :]).abs()).clamp(min=0.0)
    return w.view(len(lo), bins, samples, size).mean(dim=2)


def roi_pool(features: torch.Tensor, boxes: torch.Tensor, batch_index: torch.Tensor,
             stride: int, bins: int, samples: int = 2) -> torch.Tensor:
    """ROI-align as two separable interpolation matrices: (R, C, bins, bins)."""
    _, _, fh, fw = features.shape
    b = boxes.detach() / stride
    wy = _bilinear_weights(b[:, 1], b[:, 3], bins, fh, samples)
    wx = _bilinear_weights(b[:, 0], b[:, 2], bins, fw, samples)
    g = features[batch_index]
    t = torch.einsum("riy,rcyx->rcix", wy, g)
    return torch.einsum("rjx,rcix->rcij", wx, t)


def roi_pool_batch(features: torch.Tensor, boxes: torch.Tensor, stride: int, bins: int,
                   samples: int = 2) -> torch.Tensor:
    """Same pooling as ``roi_pool`` for padded (B, R, 4) boxes: (B, R, C, bins, bins).

    The feature map is small, so each ROI's pooling is written as a dense
    (bins*bins, H*W) weight matrix and applied with one batched matmul.
    """
    bsz, ch, fh, fw = features.shape
    r = boxes.shape[1]
    b = boxes.detach().reshape(-1, 4) / stride
    wy = _bilinear_weights(b[:, 1], b[:, 3], bins, fh, samples)
    wx = _bilinear_weights(b[:, 0], b[:, 2], bins, fw, samples)
    w = (wy[:, :, None, :, None] * wx[:, None, :, None, :]).to(features.dtype)
    w = w.reshape(bsz, r * bins * bins, fh * fw)
    out = torch.bmm(w, features.reshape(bsz, ch, fh * fw).transpose(1, 2))
    return out.view(bsz, r, bins, bins, ch).permute(0, 1, 4, 2, 3)


def grouped_nms(boxes: torch.Tensor, scores: torch.Tensor, groups: torch.Tensor,
                iou_thresh: float) -> torch.Tensor:
    """NMS applied independently within each group, in one call.

    Shifting each group to its own disjoint region of the plane means boxes
    of different groups never overlap. Returns kept indices by descending score.
    """
    if len(boxes) == 0:
        return torch.zeros(0, dtype=torch.long)
    span = boxes.max() - boxes.min() + 1.0
    shifted = boxes + (groups.to(boxes.dtype) * span)[:, None]
    return nms(shifted, scores, iou_thresh)


def to_image_batch(images, dtype=torch.float32) -> torch.Tensor:
    """Accept an NCHW tensor, one HWC array, or a list of HWC arrays."""
    if isinstance(images, torch.Tensor):
        return images.to(dtype)
    if isinstance(images, np.ndarray) and images.ndim == 3:
        images = [images]
    arr = np.stack([np.asarray(im, dtype=np.float32) for im in images])
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous().to(dtype)


class Detector:
    def __init__(self, cfg: DetectorConfig):
        self.cfg = cfg
        self.layout = build_layout(cfg)
        self._anchors = {}

    def anchors(self, dtype=torch.float32) -> torch.Tensor:
        if dtype not in self._anchors:
            self._anchors[dtype] = make_anchors(self.cfg, dtype)
        return self._anchors[dtype]

    def init_params(self, seed: int, dtype=torch.float32, zero_heads: bool = False) -> ParamVector:
        """He-normal convolutions and hidden layer; small-normal heads (or zeros)."""
        gen = torch.Generator().manual_seed(int(seed))
        values = torch.zeros(self.layout.size, dtype=torch.float64)
        head_std = {"rpn.objectness.weight": 0.01, "rpn.deltas.weight": 0.001,
                    "roi.cls.weight": 0.01, "roi.deltas.weight": 0.001}
        for name, off, shape in self.layout.entries:
            n = math.prod(shape)
            if name.endswith(".bias"):
                continue
            if name in head_std:
                if zero_heads:
                    continue
                std = head_std[name]
            else:
                fan_in = math.prod(shape[1:])
                std = math.sqrt(2.0 / fan_in)
            values[off:off + n] = torch.randn(n, generator=gen, dtype=torch.float64) * std
        return ParamVector(values.to(dtype), self.layout)

    def _check(self, params: ParamVector):
        if params.layout != self.layout:
            raise ArchitectureError("parameter layout does not match detector architecture")

    # forward passes ----------------------------------------------------------

    def features(self, params: ParamVector, images) -> torch.Tensor:
        self._check(params)
        p = params.views()
        x = to_image_batch(images, params.values.dtype)
        if x.shape[-2:] != (self.cfg.image_size, self.cfg.image_size):
            raise ArchitectureError(f"expected {self.cfg.image_size}px images, got {tuple(x.shape)}")
        for i in range(len(self.cfg.channels)):
            x = F.relu(F.conv2d(x, p[f"backbone.conv{i}.weight"], p[f"backbone.conv{i}.bias"],
                                stride=2, padding=1))
        return x

    def rpn_heads(self, params: ParamVector, features: torch.Tensor) -> tuple:
        """Batched objectness logits (B, N) and deltas (B, N, 4)."""
        p = params.views()
        a = self.cfg.num_anchors_per_cell
        h = F.relu(F.conv2d(features, p["rpn.conv.weight"], p["rpn.conv.bias"], padding=1))
        obj = F.conv2d(h, p["rpn.objectness.weight"], p["rpn.objectness.bias"])
        dl = F.conv2d(h, p["rpn.deltas.weight"], p["rpn.deltas.bias"])
        b, _, fh, fw = obj.shape
        obj = obj.permute(0, 2, 3, 1).reshape(b, -1)
        dl = dl.view(b, a, 4, fh, fw).permute(0, 3, 4, 1, 2).reshape(b, -1, 4)
        return obj, dl

    def forward_proposals(self, params: ParamVector, images, features=None) -> list:
        """One ProposalOutput per image."""
        if features is None:
            features = self.features(params, images)
        obj, dl = self.rpn_heads(params, features)
        anchors = self.anchors(params.values.dtype)
        return [ProposalOutput(obj[i], dl[i], anchors) for i in range(len(obj))]

    def select_proposals(self, prop: ProposalOutput, extra_boxes=None) -> torch.Tensor:
        """Decode, clip, NMS and keep the top ``num_proposals`` boxes (no gradient).

        ``extra_boxes`` (e.g. training targets) are appended after selection.
        """
        boxes, valid = self.select_proposals_batch(prop.objectness_logits[None], prop.deltas[None])
        boxes = boxes[0][valid[0]]
        if extra_boxes is not None and len(extra_boxes):
            boxes = torch.cat([boxes, torch.as_tensor(extra_boxes, dtype=boxes.dtype)], dim=0)
        return boxes

    def select_proposals_batch(self, obj: torch.Tensor, deltas: torch.Tensor) -> tuple:
        """Padded (B, K, 4) top proposals per image and their validity mask."""
        k = self.cfg.num_proposals
        with torch.no_grad():
            b, n = obj.shape
            anchors = self.anchors(deltas.dtype)
            boxes = decode_boxes(deltas.detach().reshape(-1, 4), anchors.repeat(b, 1))
            clip_boxes_(boxes, self.cfg.image_size)
            boxes = boxes.view(b, n, 4)
            ok = ((boxes[..., 2] - boxes[..., 0]) > 1.0) & ((boxes[..., 3] - boxes[..., 1]) > 1.0)
            scores = torch.where(ok, obj.detach(), torch.full_like(obj, -math.inf))
            top, top_idx = scores.topk(min(self.cfg.pre_nms_topk, n), dim=1)
            boxes = torch.gather(boxes, 1, top_idx[..., None].expand(-1, -1, 4)).reshape(-1, 4)
            scores = top.reshape(-1)
            image = torch.arange(b).repeat_interleave(top.shape[1])
            idx = torch.nonzero(torch.isfinite(scores)).flatten()
            keep = idx[grouped_nms(boxes[idx], scores[idx], image[idx],
                                   self.cfg.proposal_nms_iou)]
            # keep is score-descending overall; a stable sort by image keeps
            # that order inside each image
            keep = keep[torch.sort(image[keep], stable=True).indices]
            img = image[keep]
            counts = torch.bincount(img, minlength=b)
            first = torch.cumsum(counts, 0) - counts
            rank = torch.arange(len(keep)) - first[img]
            sel = rank < k
            out = boxes.new_zeros((b, k, 4))
            out[..., 2:] = 1.0
            valid = torch.zeros((b, k), dtype=torch.bool)
            out[img[sel], rank[sel]] = boxes[keep[sel]]
            valid[img[sel], rank[sel]] = True
        return out, valid

    def roi_heads(self, params: ParamVector, features: torch.Tensor, boxes: torch.Tensor) -> tuple:
        """Batched class logits (B, R, C+1) and deltas (B, R, C, 4) for (B, R, 4) boxes."""
        p = params.views()
        b, r, _ = boxes.shape
        c = self.cfg.num_classes
        pooled = roi_pool_batch(features, boxes.to(features.dtype), self.cfg.stride,
                                self.cfg.pool_size).reshape(b * r, -1)
        h = F.relu(F.linear(pooled, p["roi.fc.weight"], p["roi.fc.bias"]))
        logits = F.linear(h, p["roi.cls.weight"], p["roi.cls.bias"])
        deltas = F.linear(h, p["roi.deltas.weight"], p["roi.deltas.bias"])
        return logits.view(b, r, c + 1), deltas.view(b, r, c, 4)

    def forward_roi(self, params: ParamVector, images, proposals: list, features=None) -> list:
        """One ROIOutput per image for the given per-image proposal boxes."""
        if features is None:
            features = self.features(params, images)
        p = params.views()
        dtype = params.values.dtype
        proposals = [torch.as_tensor(b, dtype=dtype).reshape(-1, 4) for b in proposals]
        counts = [len(b) for b in proposals]
        c = self.cfg.num_classes
        if sum(counts) == 0:
            return [ROIOutput(b, features.new_zeros((0, c + 1)), features.new_zeros((0, c, 4)))
                    for b in proposals]
        batch_index = torch.repeat_interleave(torch.arange(len(counts)), torch.tensor(counts))
        pooled = roi_pool(features, torch.cat(proposals), batch_index, self.cfg.stride,
                          self.cfg.pool_size)
        h = F.relu(F.linear(pooled.flatten(1), p["roi.fc.weight"], p["roi.fc.bias"]))
        logits = F.linear(h, p["roi.cls.weight"], p["roi.cls.bias"])
        deltas = F.linear(h, p["roi.deltas.weight"], p["roi.deltas.bias"]).view(-1, c, 4)
        out, start = [], 0
        for b, n in zip(proposals, counts):
            out.append(ROIOutput(b, logits[start:start + n], deltas[start:start + n]))
            start += n
        return out

    def predict(self, params: ParamVector, images, score_floor: float = 0.05,
                nms_iou: float = 0.5) -> list:
        """Detections per image, each a score-descending list of LabeledBox.

        Rows whose argmax is background are dropped; the rest keep their
        best foreground class, pass the score floor, and go through
        class-wise NMS.
        """
        if not 0.0 <= score_floor < 1.0:
            raise ValueError(f"score_floor must be in [0, 1), got {score_floor}")
        if not 0.0 < nms_iou <= 1.0:
            raise ValueError(f"nms_iou must be in (0, 1], got {nms_iou}")
        c = self.cfg.num_classes
        with torch.no_grad():
            feats = self.features(params, images)
            obj, dl = self.rpn_heads(params, feats)
            boxes, valid = self.select_proposals_batch(obj, dl)
            logits, deltas = self.roi_heads(params, feats, boxes)
            probs = torch.softmax(logits, dim=2)
            scores, cls = probs.max(dim=2)
            keep = valid & (cls < c) & (scores >= score_floor)
            bi, ri = torch.nonzero(keep, as_tuple=True)
            cls, scores = cls[bi, ri], scores[bi, ri]
            dec = clip_boxes_(decode_boxes(deltas[bi, ri, cls], boxes[bi, ri]), self.cfg.image_size)
            order = grouped_nms(dec, scores, bi * c + cls, nms_iou)
            order = order[torch.sort(bi[order], stable=True).indices]
            rows = torch.cat([dec[order].double(), scores[order, None].double(),
                              cls[order, None].double(), bi[order, None].double()], dim=1).tolist()
        results = [[] for _ in range(len(obj))]
        for x0, y0, x1, y1, score, k, b in rows:
            results[int(b)].append(LabeledBox(BBox(x0, y0, max(x1, x0), max(y1, y0)), int(k),
                                              min(max(score, 0.0), 1.0)))
        return results


def params_to_state(params: ParamVector) -> dict:
    return {"layout": params.layout.to_list(), "values": params.values.detach().clone()}


def params_from_state(state: dict) -> ParamVector:
    return ParamVector(state["values"].clone(), ParamLayout.from_list(state["layout"]))
