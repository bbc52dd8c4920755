"""Rarity schedule and augmentation-family tests."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from nightsign.augment import (FAMILIES, AugPolicy, RarityTable,
                               applied_aug_prob, apply_augmentations,
                               apply_scene_augmentations, class_aug_prob,
                               family_decisions, family_probabilities, rarity,
                               rotate_box, rotate_image)
from nightsign.dataset import ClassCensus

POLICY = AugPolicy()
RNG = np.random.default_rng(5)


def scalar_loop_rotation(img, angle_deg):
    """Pixel-at-a-time inverse-map bilinear rotation (zero outside)."""
    import math

    h, w = img.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = math.radians(angle_deg)

    def tap(y, x, c):
        return img[y, x, c] if 0 <= y < h and 0 <= x < w else 0.0

    out = np.zeros_like(img)
    for yy in range(h):
        for xx in range(w):
            sx = cx + (xx - cx) * math.cos(theta) - (yy - cy) * math.sin(theta)
            sy = cy + (xx - cx) * math.sin(theta) + (yy - cy) * math.cos(theta)
            y0, x0 = int(np.floor(sy)), int(np.floor(sx))
            fy, fx = sy - y0, sx - x0
            for c in range(img.shape[2]):
                val = ((1 - fy) * (1 - fx) * tap(y0, x0, c)
                       + (1 - fy) * fx * tap(y0, x0 + 1, c)
                       + fy * (1 - fx) * tap(y0 + 1, x0, c)
                       + fy * fx * tap(y0 + 1, x0 + 1, c))
                out[yy, xx, c] = min(1.0, max(0.0, val))
    return out


class TestRarity:
    def test_most_common_class_has_zero_rarity(self):
        assert rarity(4204, 4204) == 0.0

    def test_unseen_class_has_full_rarity(self):
        assert rarity(0, 4204) == 1.0

    def test_published_fixture(self):
        assert rarity(22, 4204) == pytest.approx(0.62, abs=0.005)

    def test_count_max_zero_rejected(self):
        with pytest.raises(ValueError):
            rarity(0, 0)

    def test_count_above_max_rejected(self):
        with pytest.raises(ValueError):
            rarity(10, 5)

    @given(st.integers(0, 5000), st.integers(0, 5000))
    @settings(max_examples=200, deadline=None)
    def test_monotone_nonincreasing(self, a, b):
        a, b = sorted((a, b))
        cmax = 5000
        assert rarity(a, cmax) >= rarity(b, cmax)


class TestProbabilities:
    def test_published_p_class(self):
        # 0.15 + 0.75*0.62 = 0.615; tolerance inclusive with a float guard
        assert abs(class_aug_prob(0.62, POLICY) - 0.61) <= 0.005 + 1e-9

    def test_zero_rarity_gives_base(self):
        assert class_aug_prob(0.0, POLICY) == pytest.approx(0.15, abs=1e-12)

    def test_full_rarity_below_ceiling(self):
        assert class_aug_prob(1.0, POLICY) == pytest.approx(0.90, abs=1e-12)

    def test_applied_product(self):
        assert applied_aug_prob(0.61, 0.9) == pytest.approx(0.549, abs=1e-12)

    def test_applied_floor_binds(self):
        assert applied_aug_prob(0.15, 0.3) == 0.05

    def test_applied_ceiling_preserved(self):
        assert applied_aug_prob(0.95, 1.0) == 0.95

    @given(st.floats(0, 1), st.floats(0, 1))
    @settings(max_examples=200, deadline=None)
    def test_all_probabilities_clamped(self, p, w):
        assert 0.05 <= applied_aug_prob(p, w) <= 0.95

    def test_rarity_table_from_census(self):
        cen = ClassCensus(counts={"a": 100, "b": 10, "c": 1}, n_images=50,
                          n_instances=111)
        table = RarityTable.from_census(cen, POLICY)
        assert table.rarity_by_class["a"] == 0.0
        assert table.p_class["a"] == pytest.approx(0.15, abs=1e-12)
        assert table.p_class["c"] > table.p_class["b"] > table.p_class["a"]


class TestApply:
    def test_disabled_policy_is_identity(self):
        img = RNG.uniform(0, 1, size=(24, 24, 3))
        out = apply_augmentations(img, "a", AugPolicy.disabled(), None, rng_seed=3)
        np.testing.assert_array_equal(out, img)

    def test_zero_overrides_are_identity(self):
        img = RNG.uniform(0, 1, size=(24, 24, 3))
        overrides = {name: 0.0 for name in FAMILIES}
        out = apply_augmentations(img, None, POLICY, None, rng_seed=3,
                                  probability_overrides=overrides)
        np.testing.assert_array_equal(out, img)

    def test_deterministic_given_seed(self):
        img = RNG.uniform(0, 1, size=(32, 32, 3))
        a = apply_augmentations(img, None, POLICY, None, rng_seed=99)
        b = apply_augmentations(img, None, POLICY, None, rng_seed=99)
        np.testing.assert_array_equal(a, b)

    def test_forced_rotation_matches_independent_routine(self):
        img = RNG.uniform(0, 1, size=(28, 28, 3))
        policy = AugPolicy(rotation_degrees=(5.0, 5.0))
        overrides = {name: (1.0 if name == "rotation" else 0.0)
                     for name in FAMILIES}
        got = apply_augmentations(img, None, policy, None, rng_seed=1,
                                  probability_overrides=overrides)
        np.testing.assert_allclose(got, scalar_loop_rotation(img, 5.0), atol=1e-9)
        # scipy agrees except for its different constant-mode edge blending
        want = ndimage.rotate(img, 5.0, axes=(0, 1), reshape=False, order=1,
                              mode="constant", cval=0.0)
        np.testing.assert_allclose(got[3:-3, 3:-3], np.clip(want, 0, 1)[3:-3, 3:-3],
                                   atol=1e-9)

    def test_output_range_and_shape(self):
        img = RNG.uniform(0, 1, size=(30, 26, 3))
        for seed in range(8):
            out = apply_augmentations(img, None, POLICY, None, rng_seed=seed)
            assert out.shape == img.shape
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_empirical_family_frequencies(self):
        p_class = 0.61
        want = family_probabilities(POLICY, p_class)
        counts = dict.fromkeys(FAMILIES, 0)
        n = 100_000
        rng = np.random.default_rng(1234)
        for _ in range(n):
            decisions = family_decisions(rng, POLICY, p_class)
            for name, hit in decisions.items():
                counts[name] += hit
        for name in FAMILIES:
            assert abs(counts[name] / n - want[name]) < 0.01, name


class TestSceneAugment:
    def test_boxes_follow_rotation(self):
        img = np.zeros((40, 40, 3))
        img[10:20, 14:26] = 1.0
        boxes = np.array([[14.0, 10.0, 26.0, 20.0]])
        policy = AugPolicy(rotation_degrees=(5.0, 5.0))
        rot_box = rotate_box((14.0, 10.0, 26.0, 20.0), 5.0, 40, 40)
        rot_img = rotate_image(img, 5.0)
        x0, y0 = int(np.floor(rot_box[0])), int(np.floor(rot_box[1]))
        x1, y1 = int(np.ceil(rot_box[2])), int(np.ceil(rot_box[3]))
        inside = rot_img[y0:y1, x0:x1].sum()
        # bilinear sampling can smear <1px of mass past the exact hull
        assert inside >= 0.99 * rot_img.sum()
        out_img, out_boxes = apply_scene_augmentations(img, boxes, policy, 0)
        assert out_boxes.shape == (1, 4)
        assert out_img.shape == img.shape

    def test_disabled_scene_policy(self):
        img = RNG.uniform(0, 1, size=(16, 16, 3))
        boxes = np.array([[2.0, 2.0, 8.0, 8.0]])
        out_img, out_boxes = apply_scene_augmentations(
            img, boxes, AugPolicy.disabled(), 7)
        np.testing.assert_array_equal(out_img, img)
        np.testing.assert_array_equal(out_boxes, boxes)

    def test_deterministic(self):
        img = RNG.uniform(0, 1, size=(20, 20, 3))
        boxes = np.array([[1.0, 1.0, 9.0, 9.0]])
        a_img, a_boxes = apply_scene_augmentations(img, boxes, POLICY, 5)
        b_img, b_boxes = apply_scene_augmentations(img, boxes, POLICY, 5)
        np.testing.assert_array_equal(a_img, b_img)
        np.testing.assert_array_equal(a_boxes, b_boxes)
