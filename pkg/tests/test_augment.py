import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from ssdet.augment import (CUTOUT_FILL, AugmentConfig, apply_cutout, color_jitter, flip_boxes,
                           strong_augment, weak_augment)
from ssdet.core import BBox, ImageSample, LabeledBox


def _sample(width=100, height=50, boxes=None, seed=0):
    img = np.random.default_rng(seed).uniform(size=(height, width, 3)).astype(np.float32)
    boxes = boxes if boxes is not None else [LabeledBox(BBox(10, 5, 30, 20), 1)]
    return ImageSample(img, boxes, True, 0)


class _Fixed:
    """Stand-in generator whose first draw is fixed."""

    def __init__(self, value):
        self.value = value

    def random(self):
        return self.value


class TestWeakAugment:
    def test_reflection(self):
        out = weak_augment(_sample(), _Fixed(0.0))
        assert out.boxes[0].box == BBox(70, 5, 90, 20)
        assert out.boxes[0].class_id == 1
        np.testing.assert_array_equal(out.image, _sample().image[:, ::-1])

    def test_identity_branch(self):
        s = _sample()
        out = weak_augment(s, _Fixed(0.99))
        np.testing.assert_array_equal(out.image, s.image)
        assert out.boxes == s.boxes

    def test_flip_frequency(self):
        rng = np.random.default_rng(0)
        s = _sample(width=8, height=8, boxes=[LabeledBox(BBox(0, 0, 2, 2), 0)])
        flips = sum(weak_augment(s, rng).boxes[0].box.x_min == 6 for _ in range(10_000))
        assert abs(flips / 10_000 - 0.5) <= 0.02

    def test_double_flip_is_identity(self):
        boxes = [LabeledBox(BBox(1.5, 2, 7.25, 9), 0, 0.8)]
        assert flip_boxes(flip_boxes(boxes, 64), 64) == boxes

    def test_input_untouched(self):
        s = _sample()
        before = s.image.copy()
        weak_augment(s, _Fixed(0.0))
        np.testing.assert_array_equal(s.image, before)


class TestStrongAugment:
    def test_identity_mode(self):
        s = _sample()
        out = strong_augment(s.image, np.random.default_rng(0), AugmentConfig.identity())
        np.testing.assert_array_equal(out, s.image)

    def test_boxes_untouched(self):
        s = _sample()
        before = [b for b in s.boxes]
        strong_augment(s.image, np.random.default_rng(0))
        assert s.boxes == before

    def test_range(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            img = rng.uniform(size=(16, 16, 3)).astype(np.float32)
            out = strong_augment(img, rng)
            assert out.shape == img.shape
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_seeded(self):
        img = _sample().image
        a = strong_augment(img, np.random.default_rng(5))
        b = strong_augment(img, np.random.default_rng(5))
        np.testing.assert_array_equal(a, b)

    def test_defaults(self):
        cfg = AugmentConfig()
        assert (cfg.jitter_p, cfg.grayscale_p, cfg.blur_p) == (0.8, 0.2, 0.5)
        assert cfg.brightness == cfg.contrast == cfg.saturation == (0.6, 1.4)
        assert cfg.hue == (-0.1, 0.1) and cfg.blur_sigma == (0.1, 2.0)
        assert [(c.p, c.scale, c.ratio) for c in cfg.cutouts] == [
            (0.7, (0.05, 0.2), (0.3, 3.3)), (0.5, (0.02, 0.2), (0.1, 6.0)), (0.3, (0.02, 0.2), (0.05, 8.0))]

    def test_from_dict(self):
        cfg = AugmentConfig.from_dict({"hue": [-0.2, 0.2],
                                       "cutouts": [{"p": 1.0, "scale": [0.1, 0.1], "ratio": [1, 1]}]})
        assert cfg.hue == (-0.2, 0.2) and cfg.cutouts[0].scale == (0.1, 0.1)

    def test_jitter_neutral_factors(self):
        img = _sample().image
        cfg = AugmentConfig(brightness=(1, 1), contrast=(1, 1), saturation=(1, 1), hue=(0, 0))
        np.testing.assert_allclose(color_jitter(img, np.random.default_rng(0), cfg), img, atol=1e-5)


class TestCutout:
    def test_quarter_square(self):
        img = np.zeros((64, 64, 3), dtype=np.float32)
        out = apply_cutout(img, np.random.default_rng(0), (0.25, 0.25), (1.0, 1.0))
        erased = np.all(out == CUTOUT_FILL, axis=2)
        rows, cols = np.nonzero(erased)
        assert erased.sum() == 32 * 32
        assert rows.max() - rows.min() == 31 and cols.max() - cols.min() == 31

    def test_same_rng_state_same_output(self):
        img = np.zeros((32, 32, 3), dtype=np.float32)
        a = apply_cutout(img, np.random.default_rng(9), (0.05, 0.2), (0.3, 3.3))
        b = apply_cutout(img, np.random.default_rng(9), (0.05, 0.2), (0.3, 3.3))
        np.testing.assert_array_equal(a, b)

    def test_impossible_request_returns_input(self):
        img = np.zeros((4, 4, 3), dtype=np.float32)
        out = apply_cutout(img, np.random.default_rng(0), (0.01, 0.01), (1.0, 1.0))
        assert out is img

    @settings(max_examples=100)
    @given(st.integers(0, 2 ** 31), st.sampled_from([((0.05, 0.2), (0.3, 3.3)),
                                                      ((0.02, 0.2), (0.1, 6.0)),
                                                      ((0.02, 0.2), (0.05, 8.0))]))
    def test_erased_fraction_in_range(self, seed, pattern):
        scale, ratio = pattern
        img = np.zeros((64, 64, 3), dtype=np.float32)
        out = apply_cutout(img, np.random.default_rng(seed), scale, ratio)
        erased = np.all(out == CUTOUT_FILL, axis=2)
        if erased.any():
            rows, cols = np.nonzero(erased)
            h, w = rows.max() - rows.min() + 1, cols.max() - cols.min() + 1
            assert erased.sum() == h * w  # one solid rectangle
            assert scale[0] <= erased.sum() / 64 ** 2 <= scale[1]
            assert ratio[0] <= h / w <= ratio[1]
