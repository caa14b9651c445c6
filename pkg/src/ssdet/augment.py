"""Weak (flip) and strong (photometric) augmentation.

All functions are pure in (input, rng state): the caller passes a
``numpy.random.Generator`` and gets a new array back.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .core import BBox, ImageSample, LabeledBox

CUTOUT_FILL = 0.5
_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


@dataclass
class CutoutPattern:
    p: float
    scale: tuple
    ratio: tuple


@dataclass
class AugmentConfig:
    flip_p: float = 0.5
    jitter_p: float = 0.8
    brightness: tuple = (0.6, 1.4)
    contrast: tuple = (0.6, 1.4)
    saturation: tuple = (0.6, 1.4)
    hue: tuple = (-0.1, 0.1)
    grayscale_p: float = 0.2
    blur_p: float = 0.5
    blur_sigma: tuple = (0.1, 2.0)
    cutouts: list = field(default_factory=lambda: [
        CutoutPattern(0.7, (0.05, 0.2), (0.3, 3.3)),
        CutoutPattern(0.5, (0.02, 0.2), (0.1, 6.0)),
        CutoutPattern(0.3, (0.02, 0.2), (0.05, 8.0)),
    ])

    @classmethod
    def identity(cls) -> "AugmentConfig":
        """Every probability forced to 0."""
        cfg = cls(flip_p=0.0, jitter_p=0.0, grayscale_p=0.0, blur_p=0.0)
        for c in cfg.cutouts:
            c.p = 0.0
        return cfg

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentConfig":
        d = dict(d)
        if "cutouts" in d:
            d["cutouts"] = [c if isinstance(c, CutoutPattern) else
                            CutoutPattern(c["p"], tuple(c["scale"]), tuple(c["ratio"]))
                            for c in d["cutouts"]]
        for k in ("brightness", "contrast", "saturation", "hue", "blur_sigma"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class AugmentedPair:
    image: np.ndarray
    boxes: list


def flip_boxes(boxes, width: float) -> list:
    return [
        LabeledBox(BBox(width - b.box.x_max, b.box.y_min, width - b.box.x_min, b.box.y_max),
                   b.class_id, b.score)
        for b in boxes
    ]


def weak_augment(sample: ImageSample, rng: np.random.Generator,
                 flip_p: float = 0.5) -> AugmentedPair:
    """Horizontal flip with probability ``flip_p``; boxes follow the image."""
    if rng.random() < flip_p:
        image = np.ascontiguousarray(sample.image[:, ::-1])
        return AugmentedPair(image, flip_boxes(sample.boxes, sample.width))
    return AugmentedPair(sample.image, list(sample.boxes))


def _grayscale(img: np.ndarray) -> np.ndarray:
    return img @ _LUMA


def _hue_rotate(img: np.ndarray, shift: float) -> np.ndarray:
    # rotation about the grey axis by 2*pi*shift
    theta = 2.0 * math.pi * shift
    c, s = math.cos(theta), math.sin(theta)
    k = 1.0 / 3.0
    r = math.sqrt(k)
    m = np.array([
        [c + (1 - c) * k, k * (1 - c) - r * s, k * (1 - c) + r * s],
        [k * (1 - c) + r * s, c + (1 - c) * k, k * (1 - c) - r * s],
        [k * (1 - c) - r * s, k * (1 - c) + r * s, c + (1 - c) * k],
    ], dtype=np.float32)
    return img @ m.T


def color_jitter(img: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig) -> np.ndarray:
    b = rng.uniform(*cfg.brightness)
    c = rng.uniform(*cfg.contrast)
    s = rng.uniform(*cfg.saturation)
    h = rng.uniform(*cfg.hue)
    img = np.clip(img * b, 0.0, 1.0)
    mean = _grayscale(img).mean()
    img = np.clip((img - mean) * c + mean, 0.0, 1.0)
    gray = _grayscale(img)[..., None]
    img = np.clip((img - gray) * s + gray, 0.0, 1.0)
    return np.clip(_hue_rotate(img, h), 0.0, 1.0)


def apply_cutout(image: np.ndarray, rng: np.random.Generator, scale_range, ratio_range,
                 attempts: int = 10) -> np.ndarray:
    """Erase one rectangle whose area fraction and aspect lie in the given ranges.

    Returns the input unchanged if ``attempts`` proposals all fail.
    """
    h, w = image.shape[:2]
    total = h * w
    log_lo, log_hi = math.log(ratio_range[0]), math.log(ratio_range[1])
    for _ in range(attempts):
        area = total * rng.uniform(scale_range[0], scale_range[1])
        ratio = math.exp(rng.uniform(log_lo, log_hi))
        eh = int(round(math.sqrt(area * ratio)))
        ew = int(round(math.sqrt(area / ratio)))
        if not (0 < eh <= h and 0 < ew <= w):
            continue
        frac = eh * ew / total
        if not scale_range[0] <= frac <= scale_range[1]:
            continue
        if not ratio_range[0] <= eh / ew <= ratio_range[1]:
            continue
        top = int(rng.integers(0, h - eh + 1))
        left = int(rng.integers(0, w - ew + 1))
        out = image.copy()
        out[top:top + eh, left:left + ew] = CUTOUT_FILL
        return out
    return image


def strong_augment(image: np.ndarray, rng: np.random.Generator,
                   cfg: AugmentConfig | None = None) -> np.ndarray:
    """Photometric-only strong view; boxes are never touched."""
    cfg = cfg or AugmentConfig()
    img = image.astype(np.float32, copy=True)
    if rng.random() < cfg.jitter_p:
        img = color_jitter(img, rng, cfg)
    if rng.random() < cfg.grayscale_p:
        img = np.repeat(_grayscale(img)[..., None], 3, axis=2)
    if rng.random() < cfg.blur_p:
        sigma = rng.uniform(*cfg.blur_sigma)
        img = gaussian_filter(img, sigma=(sigma, sigma, 0), mode="reflect")
    for pattern in cfg.cutouts:
        if rng.random() < pattern.p:
            img = apply_cutout(img, rng, pattern.scale, pattern.ratio)
    return np.clip(img, 0.0, 1.0).astype(np.float32, copy=False)
