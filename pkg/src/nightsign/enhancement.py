"""Learned per-image enhancement: a small parameter head predicts a raw
3-vector which is range-mapped to (gamma, alpha, zeta) and applied as a
differentiable unsharp -> gamma/brightness pipeline, regularized toward
the no-op parameters.

All transforms accept plain numpy arrays or autodiff Tensors; gradients
flow through images and parameters whenever a Tensor is involved.
Images are intensity arrays in [0, 1], shaped (H, W, 3) or (B, H, W, 3).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .imageops import gaussian_kernel1d
from . import nn


@dataclass
class EnhanceConfig:
    gamma_range: tuple[float, float] = (0.3, 3.0)
    alpha_range: tuple[float, float] = (0.3, 4.0)
    zeta_range: tuple[float, float] = (0.0, 1.2)
    epsilon: float = 1e-4          # inner clamp floor; keeps the power-law gradient finite
    sigma_u: float = 1.0
    lambda_gamma: float = 1e-3
    lambda_alpha: float = 1e-3
    lambda_zeta: float = 5e-3
    defaults: tuple[float, float, float] = (1.0, 1.0, 0.0)

    def __post_init__(self):
        if not (0.0 < self.epsilon < 1.0):
            raise ValueError("epsilon must lie in (0, 1)")
        if self.sigma_u <= 0:
            raise ValueError("sigma_u must be positive")
        if min(self.lambda_gamma, self.lambda_alpha, self.lambda_zeta) < 0:
            raise ValueError("lambda weights must be non-negative")

    @property
    def ranges(self) -> tuple[tuple[float, float], ...]:
        return (self.gamma_range, self.alpha_range, self.zeta_range)

    @property
    def lambdas(self) -> tuple[float, float, float]:
        return (self.lambda_gamma, self.lambda_alpha, self.lambda_zeta)


@dataclass
class ParamHeadConfig:
    downsample_size: int = 64
    conv_channels: tuple[int, ...] = (16, 32, 64)
    mlp_hidden: int = 32


@dataclass
class EnhanceParams:
    """The (gamma, alpha, zeta) triple; scalars or length-B batch vectors.

    Components may be floats, numpy arrays, or Tensors (the latter keep
    the enhancement differentiable w.r.t. the predicting head).
    """

    gamma: object
    alpha: object
    zeta: object

    def astuple(self):
        return (self.gamma, self.alpha, self.zeta)

    def values(self) -> tuple[float, ...] | tuple[np.ndarray, ...]:
        out = []
        for c in self.astuple():
            v = c.data if isinstance(c, Tensor) else np.asarray(c, dtype=np.float64)
            out.append(float(v) if v.ndim == 0 else v)
        return tuple(out)


class ParamHead(nn.Module):
    """Three stride-2 convolutions, global average pool, then an MLP
    emitting the 3 raw enhancement scores.

    `output_bias` presets the final-layer bias; training uses the no-op
    scores (see `noop_raw_scores`) so the wrapper starts as an identity
    and learns to deviate only where detection benefits.
    """

    def __init__(self, config: ParamHeadConfig, rng: np.random.Generator,
                 output_bias: np.ndarray | None = None):
        self.config = config
        widths = (3,) + tuple(config.conv_channels)
        self.convs = [nn.Conv2d(a, b, kernel=3, stride=2, padding=1, rng=rng)
                      for a, b in zip(widths[:-1], widths[1:])]
        self.fc1 = nn.Linear(widths[-1], config.mlp_hidden, rng)
        self.fc2 = nn.Linear(config.mlp_hidden, 3, rng)
        if output_bias is not None:
            self.fc2.bias.data = np.asarray(output_bias, dtype=np.float64).copy()

    def __call__(self, images: Tensor) -> Tensor:
        x = as_tensor(images)
        for conv in self.convs:
            x = conv(x).relu()
        x = x.mean(axis=(1, 2))            # global average pool -> (B, C)
        return self.fc2(self.fc1(x).relu())


def predict_raw_params(image, head, downsample_size: int | None = None):
    """Run the parameter head on a bilinearly downsampled image.

    Accepts one (H, W, 3) image or a (B, H, W, 3) batch; returns the raw
    3-vector (or (B, 3) batch) as a Tensor.
    """
    t = as_tensor(image)
    if t.ndim == 3:
        t, single = t.reshape((1,) + t.shape), True
    elif t.ndim == 4:
        single = False
    else:
        raise ValueError(f"expected (H,W,3) or (B,H,W,3), got {t.shape}")
    if t.shape[1] == 0 or t.shape[2] == 0:
        raise ValueError("image has zero spatial extent")
    size = downsample_size
    if size is None:
        size = getattr(getattr(head, "config", None), "downsample_size", 64)
    down = ad.resize_bilinear(t, (size, size), axes=(1, 2))
    z = head(down)
    return z.reshape(-1) if single else z


def scale_params(z_raw, config: EnhanceConfig) -> EnhanceParams:
    """Map raw scores to operational ranges:
    p = (tanh(z) + 1)/2 * (p_max - p_min) + p_min, per component."""
    z = as_tensor(z_raw)
    if z.shape[-1] != 3:
        raise ValueError(f"z_raw must have trailing dimension 3, got {z.shape}")
    comps = []
    for i, (lo, hi) in enumerate(config.ranges):
        zi = z[..., i]
        comps.append((zi.tanh() + 1.0) * (0.5 * (hi - lo)) + lo)
    gamma, alpha, zeta = comps
    if not isinstance(z_raw, Tensor):
        gamma, alpha, zeta = gamma.data, alpha.data, zeta.data
    return EnhanceParams(gamma=gamma, alpha=alpha, zeta=zeta)


def invert_scale(value: float, value_range: tuple[float, float]) -> float:
    """Raw score whose scaled parameter equals `value` (analytic inverse)."""
    lo, hi = value_range
    u = 2.0 * (value - lo) / (hi - lo) - 1.0
    if not (-1.0 < u < 1.0):
        raise ValueError(f"{value} not strictly inside {value_range}")
    return float(np.arctanh(u))


def noop_raw_scores(config: EnhanceConfig, zeta_floor: float = 0.05) -> np.ndarray:
    """Raw scores mapping to (near-)identity parameters. Zeta's no-op value
    sits on its range boundary, unreachable through tanh, so a small floor
    stands in for it."""
    defaults = list(config.defaults)
    defaults[2] = max(defaults[2], config.zeta_range[0] + zeta_floor)
    return np.array([invert_scale(v, r)
                     for v, r in zip(defaults, config.ranges)])


def _spatial_axes(t: Tensor) -> tuple[int, int]:
    if t.ndim == 3:
        return (0, 1)
    if t.ndim == 4:
        return (1, 2)
    raise ValueError(f"expected 3- or 4-D image tensor, got shape {t.shape}")


def _broadcast_param(p, image: Tensor) -> Tensor:
    """Reshape a batch parameter vector so it broadcasts over (B,H,W,C)."""
    t = as_tensor(p)
    if t.ndim == 0:
        return t
    if image.ndim == 4 and t.ndim == 1 and t.shape[0] == image.shape[0]:
        return t.reshape(t.shape[0], 1, 1, 1)
    raise ValueError(f"parameter shape {t.shape} does not match image {image.shape}")


def gaussian_blur(image, sigma: float) -> Tensor:
    """Separable per-channel Gaussian blur with reflect padding."""
    t = as_tensor(image)
    kernel = gaussian_kernel1d(sigma)
    radius = (kernel.shape[0] - 1) // 2
    for axis in _spatial_axes(t):
        t = ad.reflect_pad(t, radius, axis)
        t = ad.correlate1d(t, kernel, axis)
    return t


def unsharp(image, zeta, sigma_u: float):
    """Edge boost: image + zeta * (image - blur(image)). Not clamped here;
    the downstream gamma/brightness stage owns range handling."""
    had_tensor = isinstance(image, Tensor) or isinstance(zeta, Tensor)
    t = as_tensor(image)
    z = _broadcast_param(zeta, t)
    out = t + z * (t - gaussian_blur(t, sigma_u))
    return out if had_tensor else out.data


def gamma_brightness(image, gamma, alpha, epsilon: float):
    """clamp(alpha * clamp(image, epsilon, 1)^gamma, 0, 1)."""
    had_tensor = any(isinstance(v, Tensor) for v in (image, gamma, alpha))
    t = as_tensor(image)
    g = _broadcast_param(gamma, t)
    a = _broadcast_param(alpha, t)
    out = (a * (t.clip(epsilon, 1.0) ** g)).clip(0.0, 1.0)
    return out if had_tensor else out.data


def enhance(image, params: EnhanceParams, config: EnhanceConfig):
    """Unsharp masking followed by gamma/brightness correction."""
    had_tensor = (isinstance(image, Tensor)
                  or any(isinstance(c, Tensor) for c in params.astuple()))
    sharpened = unsharp(as_tensor(image), params.zeta, config.sigma_u)
    out = gamma_brightness(sharpened, params.gamma, params.alpha, config.epsilon)
    return out if had_tensor else out.data


def preproc_loss(batch_params, config: EnhanceConfig):
    """Mean over the batch of sum_i lambda_i * (p_i - p_default_i)^2.

    `batch_params` is a list of EnhanceParams or a single EnhanceParams
    whose components are scalars or length-B vectors.
    """
    if isinstance(batch_params, EnhanceParams):
        params = batch_params
        had_tensor = any(isinstance(c, Tensor) for c in params.astuple())
    else:
        items = list(batch_params)
        if not items:
            raise ValueError("preproc_loss needs a non-empty batch")
        had_tensor = any(isinstance(c, Tensor)
                         for p in items for c in p.astuple())
        stacked = []
        for i in range(3):
            comps = [as_tensor(p.astuple()[i]).reshape(1) for p in items]
            stacked.append(ad.concatenate(comps, axis=0))
        params = EnhanceParams(*stacked)

    total = None
    for comp, lam, default in zip(params.astuple(), config.lambdas, config.defaults):
        c = as_tensor(comp)
        if c.size == 0:
            raise ValueError("preproc_loss needs a non-empty batch")
        dev = (c - default) ** 2.0 * lam
        term = dev.mean() if c.ndim > 0 else dev
        total = term if total is None else total + term
    return total if had_tensor else total.item()
