"""Stochastic training augmentation.

Five families (photometric jitter, JPEG compression, Gaussian noise,
blur, small rotation), each applied independently per image with a
probability that combines a per-class rarity schedule with a per-family
weight:

    r(c)      = 1 - log(1 + count(c)) / log(1 + count_max)
    p_class   = clamp(p_base + p_scale * r(c), 0.05, 0.95)
    p_applied = clamp(p_class * w_family,      0.05, 0.95)

Rare classes therefore see heavier augmentation. Whole-scene (detector)
augmentation uses p_class = 1 since scenes are multi-class; rotation
there also rewrites the ground-truth boxes.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy import ndimage

from .dataset import ClassCensus
from .imageops import to_uint8

FAMILIES = ("photometric", "jpeg", "gaussian_noise", "blur", "rotation")

PROB_FLOOR = 0.05
PROB_CEIL = 0.95


@dataclass
class AugPolicy:
    type_weights: dict[str, float] = field(default_factory=lambda: {
        "photometric": 1.0, "jpeg": 0.9, "gaussian_noise": 0.8,
        "blur": 0.6, "rotation": 0.5})
    p_base: float = 0.15
    p_scale: float = 0.75
    clamp_bounds: tuple[float, float] = (PROB_FLOOR, PROB_CEIL)
    jitter_range: tuple[float, float] = (0.7, 1.3)
    jpeg_quality: tuple[int, int] = (30, 90)
    noise_sigma: tuple[float, float] = (0.01, 0.05)
    blur_sigma: tuple[float, float] = (0.5, 2.0)
    rotation_degrees: tuple[float, float] = (-5.0, 5.0)
    enabled: bool = True

    def __post_init__(self):
        for name, w in self.type_weights.items():
            if not (0.0 < w <= 1.0):
                raise ValueError(f"weight for {name} must be in (0, 1]")
        lo, hi = self.clamp_bounds
        if not lo < hi:
            raise ValueError("clamp bounds must be ordered")

    @classmethod
    def disabled(cls) -> "AugPolicy":
        return cls(enabled=False)


def rarity(count: int, count_max: int) -> float:
    """Logarithmic under-representation score in [0, 1]."""
    if count_max <= 0:
        raise ValueError("count_max must be positive")
    if count < 0 or count > count_max:
        raise ValueError(f"count {count} outside [0, count_max={count_max}]")
    return 1.0 - math.log1p(count) / math.log1p(count_max)


def class_aug_prob(r: float, policy: AugPolicy) -> float:
    if not (0.0 <= r <= 1.0):
        raise ValueError(f"rarity {r} outside [0, 1]")
    lo, hi = policy.clamp_bounds
    return float(np.clip(policy.p_base + policy.p_scale * r, lo, hi))


def applied_aug_prob(p_class: float, w_type: float,
                     bounds: tuple[float, float] = (PROB_FLOOR, PROB_CEIL)) -> float:
    if not (0.0 <= p_class <= 1.0 and 0.0 <= w_type <= 1.0):
        raise ValueError("p_class and w_type must be in [0, 1]")
    return float(np.clip(p_class * w_type, bounds[0], bounds[1]))


@dataclass
class RarityTable:
    rarity_by_class: dict[str, float]
    p_class: dict[str, float]

    @classmethod
    def from_census(cls, cen: ClassCensus, policy: AugPolicy) -> "RarityTable":
        cmax = cen.count_max
        r = {name: rarity(count, cmax) for name, count in cen.counts.items()}
        p = {name: class_aug_prob(val, policy) for name, val in r.items()}
        return cls(rarity_by_class=r, p_class=p)


# -- family primitives --------------------------------------------------------


def photometric_jitter(img: np.ndarray, brightness: float, contrast: float,
                       saturation: float) -> np.ndarray:
    out = img * brightness
    mean = out.mean()
    out = (out - mean) * contrast + mean
    gray = out @ np.array([0.299, 0.587, 0.114])
    out = gray[..., None] + (out - gray[..., None]) * saturation
    return np.clip(out, 0.0, 1.0)


def jpeg_compress(img: np.ndarray, quality: int) -> np.ndarray:
    buf = io.BytesIO()
    Image.fromarray(to_uint8(img)).save(buf, format="JPEG", quality=int(quality))
    buf.seek(0)
    with Image.open(buf) as decoded:
        return np.asarray(decoded.convert("RGB"), dtype=np.float64) / 255.0


def add_gaussian_noise(img: np.ndarray, sigma: float,
                       rng: np.random.Generator) -> np.ndarray:
    return np.clip(img + rng.normal(0.0, sigma, size=img.shape), 0.0, 1.0)


def blur_image(img: np.ndarray, sigma: float) -> np.ndarray:
    out = ndimage.gaussian_filter(img, sigma=(sigma, sigma, 0.0))
    return np.clip(out, 0.0, 1.0)


def rotate_image(img: np.ndarray, angle_deg: float) -> np.ndarray:
    """Bilinear rotation about the image center; exposed corners become 0."""
    h, w = img.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = math.radians(angle_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    # inverse map: source position for every output pixel (+angle turns
    # content counterclockwise on screen, matching scipy.ndimage.rotate)
    sy = cy + (xs - cx) * sin_t + (ys - cy) * cos_t
    sx = cx + (xs - cx) * cos_t - (ys - cy) * sin_t
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    wy = sy - y0
    wx = sx - x0
    out = np.zeros_like(img)
    for dy in (0, 1):
        for dx in (0, 1):
            yy, xx = y0 + dy, x0 + dx
            weight = ((wy if dy else 1 - wy) * (wx if dx else 1 - wx))
            valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            sample = np.zeros_like(img)
            sample[valid] = img[yy[valid], xx[valid]]
            out += weight[..., None] * sample
    return np.clip(out, 0.0, 1.0)


def rotate_box(box: tuple[float, float, float, float], angle_deg: float,
               width: int, height: int) -> tuple[float, float, float, float]:
    """Axis-aligned hull of the box corners under the same rotation
    rotate_image applies to the pixels, clipped to the image."""
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    theta = math.radians(angle_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    x0, y0, x1, y1 = box
    xs, ys = [], []
    for px, py in ((x0, y0), (x1, y0), (x0, y1), (x1, y1)):
        dx, dy = px - cx, py - cy
        # forward map (inverse of the sampling transform above)
        xs.append(cx + dx * cos_t + dy * sin_t)
        ys.append(cy - dx * sin_t + dy * cos_t)
    nx0 = max(0.0, min(xs))
    ny0 = max(0.0, min(ys))
    nx1 = min(float(width), max(xs))
    ny1 = min(float(height), max(ys))
    return (nx0, ny0, nx1, ny1)


# -- application --------------------------------------------------------------


def family_probabilities(policy: AugPolicy, p_class: float) -> dict[str, float]:
    return {name: applied_aug_prob(p_class, policy.type_weights[name],
                                   policy.clamp_bounds)
            for name in FAMILIES}


def family_decisions(rng: np.random.Generator, policy: AugPolicy,
                     p_class: float,
                     probability_overrides: dict[str, float] | None = None,
                     ) -> dict[str, bool]:
    probs = family_probabilities(policy, p_class)
    if probability_overrides:
        probs.update(probability_overrides)
    draws = rng.random(len(FAMILIES))
    return {name: bool(draws[i] < probs[name]) for i, name in enumerate(FAMILIES)}


def _apply_family(name: str, img: np.ndarray, rng: np.random.Generator,
                  policy: AugPolicy) -> np.ndarray:
    if name == "photometric":
        b, c, s = rng.uniform(*policy.jitter_range, size=3)
        return photometric_jitter(img, b, c, s)
    if name == "jpeg":
        q = int(round(rng.uniform(*policy.jpeg_quality)))
        return jpeg_compress(img, q)
    if name == "gaussian_noise":
        return add_gaussian_noise(img, rng.uniform(*policy.noise_sigma), rng)
    if name == "blur":
        return blur_image(img, rng.uniform(*policy.blur_sigma))
    if name == "rotation":
        return rotate_image(img, rng.uniform(*policy.rotation_degrees))
    raise ValueError(f"unknown augmentation family '{name}'")


def apply_augmentations(image: np.ndarray, label_class: str | None,
                        policy: AugPolicy, rarity_table: RarityTable | None,
                        rng_seed: int,
                        probability_overrides: dict[str, float] | None = None,
                        ) -> np.ndarray:
    """Apply each family independently with its scheduled probability.

    Deterministic given (image, policy, seed). With no rarity table or no
    label the class probability defaults to 1 (weights still apply).
    """
    img = np.asarray(image, dtype=np.float64)
    if not policy.enabled:
        return img.copy()
    p_class = 1.0
    if rarity_table is not None and label_class is not None:
        p_class = rarity_table.p_class[label_class]
    rng = np.random.default_rng(rng_seed)
    decisions = family_decisions(rng, policy, p_class, probability_overrides)
    for name in FAMILIES:
        if decisions[name]:
            img = _apply_family(name, img, rng, policy)
    return np.clip(img, 0.0, 1.0)


def apply_scene_augmentations(image: np.ndarray, boxes: np.ndarray,
                              policy: AugPolicy, rng_seed: int,
                              ) -> tuple[np.ndarray, np.ndarray]:
    """Whole-scene variant for detector training (class-agnostic, so
    p_class = 1). Rotation rewrites the boxes to the rotated hulls."""
    img = np.asarray(image, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if not policy.enabled:
        return img.copy(), boxes.copy()
    rng = np.random.default_rng(rng_seed)
    decisions = family_decisions(rng, policy, 1.0)
    h, w = img.shape[:2]
    for name in FAMILIES:
        if not decisions[name]:
            continue
        if name == "rotation":
            angle = rng.uniform(*policy.rotation_degrees)
            img = rotate_image(img, angle)
            boxes = np.array([rotate_box(tuple(b), angle, w, h) for b in boxes]
                             ).reshape(-1, 4)
        else:
            img = _apply_family(name, img, rng, policy)
    return np.clip(img, 0.0, 1.0), boxes
