"""Detection stage: a pluggable single-stage backbone behind a thin
interface, wrapped by the learned enhancement pipeline, trained with a
two-phase zero-one schedule (head-only warm-up with the backbone frozen,
then joint fine-tuning).

The bundled TinyGridDetector is a deliberately small anchor-free
reference backbone (three stride-2 conv blocks and a 1x1 objectness/box
head on the cell grid) meant for CPU-scale experiments on synthetic
scenes. Any detector exposing the same interface — forward / loss /
decode / freeze — plugs into the wrapper unchanged.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from . import nn
from .augment import AugPolicy, apply_scene_augmentations
from .dataset import crop_instance
from .enhancement import (EnhanceConfig, EnhanceParams, ParamHead,
                          ParamHeadConfig, enhance, noop_raw_scores,
                          predict_raw_params, preproc_loss, scale_params)
from .metrics import iou


@dataclass
class Detection:
    box: tuple[float, float, float, float]
    confidence: float
    class_index: int = 0  # single "signboard" class at this stage

    def __post_init__(self):
        if not (0.0 <= self.confidence <= 1.0):
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        x0, y0, x1, y1 = self.box
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"malformed box {self.box}")


class DetectorBackbone(Protocol):
    backbone_id: str

    def forward(self, images) -> Tensor: ...

    def loss(self, predictions: Tensor, gt_boxes: Sequence[np.ndarray]) -> Tensor: ...

    def decode(self, predictions: np.ndarray,
               confidence_threshold: float) -> list[list[Detection]]: ...

    def freeze(self) -> None: ...

    def unfreeze(self) -> None: ...

    def parameters(self) -> list[Tensor]: ...


class TinyGridDetector(nn.Module):
    """Anchor-free single-class detector on an image_size/8 cell grid.

    Per cell: objectness logit, center offsets (through sigmoid), and
    log-scale width/height relative to the cell stride.
    """

    backbone_id = "tiny-grid-v1"

    def __init__(self, image_size: int, rng: np.random.Generator,
                 widths: tuple[int, int, int] = (16, 32, 64),
                 positive_weight: float = 8.0, box_weight: float = 2.0):
        if image_size % 8:
            raise ValueError("image_size must be divisible by 8")
        self.image_size = image_size
        self.stride = 8
        self.grid = image_size // 8
        self.widths = widths
        self.positive_weight = positive_weight
        self.box_weight = box_weight
        chans = (3,) + tuple(widths)
        self.convs = [nn.Conv2d(a, b, kernel=3, stride=2, padding=1, rng=rng)
                      for a, b in zip(chans[:-1], chans[1:])]
        self.head = nn.Conv2d(widths[-1], 5, kernel=1, stride=1, padding=0, rng=rng)
        self._frozen = False

    def forward(self, images) -> Tensor:
        x = as_tensor(images)
        if x.ndim == 3:
            x = x.reshape((1,) + x.shape)
        for conv in self.convs:
            x = conv(x).leaky_relu(0.1)  # leaky: survives near-black inputs
        return self.head(x)  # (B, grid, grid, 5)

    def freeze(self) -> None:
        self._frozen = True

    def unfreeze(self) -> None:
        self._frozen = False

    @property
    def frozen(self) -> bool:
        return self._frozen

    def _targets(self, gt_boxes: np.ndarray):
        obj = np.zeros((self.grid, self.grid))
        box = np.zeros((self.grid, self.grid, 4))
        for x0, y0, x1, y1 in np.asarray(gt_boxes).reshape(-1, 4):
            cx, cy = 0.5 * (x0 + x1), 0.5 * (y0 + y1)
            j = int(np.clip(cx // self.stride, 0, self.grid - 1))
            i = int(np.clip(cy // self.stride, 0, self.grid - 1))
            obj[i, j] = 1.0
            box[i, j] = (cx / self.stride - j, cy / self.stride - i,
                         np.log(max(x1 - x0, 1e-3) / self.stride),
                         np.log(max(y1 - y0, 1e-3) / self.stride))
        return obj, box

    def loss(self, predictions: Tensor, gt_boxes: Sequence[np.ndarray]) -> Tensor:
        preds = predictions
        batch = preds.shape[0]
        obj_t = np.stack([self._targets(b)[0] for b in gt_boxes])
        box_t = np.stack([self._targets(b)[1] for b in gt_boxes])
        logits = preds[..., 0]
        # weighted binary cross-entropy: -w_pos*y*log s(x) - (1-y)*log(1-s(x))
        pos = Tensor(obj_t)
        weights = Tensor(1.0 + (self.positive_weight - 1.0) * obj_t)
        bce = (logits.softplus() - logits * pos) * weights
        total = bce.mean()
        mask = obj_t > 0
        if mask.any():
            pred_box = preds[..., 1:]
            offsets = pred_box[..., 0:2].sigmoid()
            sizes = pred_box[..., 2:4]
            box_pred = ad.concatenate([offsets, sizes], axis=-1)
            diff = (box_pred - Tensor(box_t)) * Tensor(mask[..., None].astype(float))
            box_loss = (diff * diff).sum() * (1.0 / max(1, int(mask.sum())))
            total = total + self.box_weight * box_loss
        return total

    def decode(self, predictions: np.ndarray,
               confidence_threshold: float) -> list[list[Detection]]:
        preds = np.asarray(predictions)
        if preds.ndim == 3:
            preds = preds[None]
        out: list[list[Detection]] = []
        for p in preds:
            conf = 1.0 / (1.0 + np.exp(-p[..., 0]))
            dets = []
            for i, j in zip(*np.nonzero(conf >= confidence_threshold)):
                tx, ty = p[i, j, 1], p[i, j, 2]
                sx = 1.0 / (1.0 + np.exp(-tx))
                sy = 1.0 / (1.0 + np.exp(-ty))
                cx = (j + sx) * self.stride
                cy = (i + sy) * self.stride
                w = float(np.exp(np.clip(p[i, j, 3], -6, 6)) * self.stride)
                h = float(np.exp(np.clip(p[i, j, 4], -6, 6)) * self.stride)
                x0 = float(np.clip(cx - w / 2, 0, self.image_size - 1))
                y0 = float(np.clip(cy - h / 2, 0, self.image_size - 1))
                x1 = float(np.clip(cx + w / 2, x0 + 1e-3, self.image_size))
                y1 = float(np.clip(cy + h / 2, y0 + 1e-3, self.image_size))
                dets.append(Detection(box=(x0, y0, x1, y1),
                                      confidence=float(conf[i, j])))
            out.append(dets)
        return out


def nms(detections: list[Detection], iou_threshold: float = 0.5) -> list[Detection]:
    """Greedy non-max suppression, confidence descending."""
    ordered = sorted(detections, key=lambda d: -d.confidence)
    kept: list[Detection] = []
    for det in ordered:
        if all(iou(det.box, k.box) < iou_threshold for k in kept):
            kept.append(det)
    return kept


@dataclass
class TrainSchedule:
    head_epochs: int = 10
    joint_epochs: int = 50
    head_lr: float = 1e-3
    joint_lr: float = 1e-4
    joint_head_lr: float | None = None  # slower head in phase 1 avoids tanh saturation
    batch_size: int = 32

    def __post_init__(self):
        if self.head_epochs < 0 or self.joint_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.joint_head_lr is None:
            self.joint_head_lr = self.joint_lr


def wrapped_forward(images, head: ParamHead, backbone, config: EnhanceConfig,
                    ) -> tuple[Tensor, EnhanceParams, Tensor]:
    """Enhancement-wrapped detection forward pass.

    pipeline: predict raw scores on the downsampled image, map them to
    operational ranges, enhance, then run the backbone on the result.
    Returns (predictions, per-image parameters, enhanced images) so the
    combined loss can see every intermediate.
    """
    t = as_tensor(images)
    if t.ndim == 3:
        t = t.reshape((1,) + t.shape)
    z_raw = predict_raw_params(t, head)
    params = scale_params(z_raw, config)
    enhanced = enhance(t, params, config)
    predictions = backbone.forward(enhanced)
    return predictions, params, enhanced


def total_loss(l_detect, params: EnhanceParams, config: EnhanceConfig):
    """Detection loss plus the parameter regularizer."""
    return as_tensor(l_detect) + preproc_loss(params, config)


def _epoch_pass(samples, head, backbone, enhance_config, optimizers, schedule,
                rng, policy, seed, epoch, train_wrapper: bool) -> float:
    order = rng.permutation(len(samples))
    total = 0.0
    for start in range(0, len(samples), schedule.batch_size):
        idx = order[start:start + schedule.batch_size]
        images, boxes = [], []
        for k in idx:
            img, bxs = samples[k]
            if policy is not None and policy.enabled:
                img, bxs = apply_scene_augmentations(
                    img, bxs, policy, rng_seed=hash((seed, epoch, int(k))) % 2 ** 32)
            images.append(img)
            boxes.append(bxs)
        batch = np.stack(images)
        for opt in optimizers:
            opt.zero_grad()
        if train_wrapper:
            preds, params, _ = wrapped_forward(batch, head, backbone, enhance_config)
            loss = total_loss(backbone.loss(preds, boxes), params, enhance_config)
        else:
            preds = backbone.forward(Tensor(batch))
            loss = backbone.loss(preds, boxes)
        if not np.isfinite(loss.data):
            raise FloatingPointError(
                f"non-finite detection loss at epoch {epoch}, batch {start}")
        loss.backward()
        for opt in optimizers:
            opt.step()
        total += loss.item() * len(idx)
    return total / len(samples)


def train_detector(data, schedule: TrainSchedule, seed: int,
                   head: ParamHead | None = None,
                   backbone=None,
                   enhance_config: EnhanceConfig | None = None,
                   head_config: ParamHeadConfig | None = None,
                   image_size: int = 96,
                   policy: AugPolicy | None = None,
                   ) -> tuple[ParamHead, object, dict[str, list[float]]]:
    """Two-phase wrapper training.

    Phase 0 freezes the backbone and trains only the parameter head for
    head_epochs; phase 1 unfreezes everything for joint_epochs. `data` is
    a sequence of (image, boxes) pairs with images in [0, 1]. Scene
    augmentations (when a policy is given) run before the wrapper.
    """
    samples = list(data)
    if not samples:
        raise ValueError("empty training set")
    enhance_config = enhance_config or EnhanceConfig()
    rng = np.random.default_rng(seed)
    if head is None:
        head = ParamHead(head_config or ParamHeadConfig(),
                         np.random.default_rng(seed + 1),
                         output_bias=noop_raw_scores(enhance_config))
    if backbone is None:
        backbone = TinyGridDetector(image_size, np.random.default_rng(seed + 2))
    history: dict[str, list[float]] = {"phase": [], "loss": []}

    backbone.freeze()
    opt = nn.Adam(head.parameters(), lr=schedule.head_lr)
    for epoch in range(schedule.head_epochs):
        loss = _epoch_pass(samples, head, backbone, enhance_config, [opt],
                           schedule, rng, policy, seed, epoch, True)
        history["phase"].append(0)
        history["loss"].append(loss)

    backbone.unfreeze()
    joint_opts = [nn.Adam(head.parameters(), lr=schedule.joint_head_lr),
                  nn.Adam(backbone.parameters(), lr=schedule.joint_lr)]
    for epoch in range(schedule.joint_epochs):
        loss = _epoch_pass(samples, head, backbone, enhance_config, joint_opts,
                           schedule, rng, policy, seed,
                           schedule.head_epochs + epoch, True)
        history["phase"].append(1)
        history["loss"].append(loss)
    return head, backbone, history


def train_backbone_only(data, schedule: TrainSchedule, seed: int,
                        backbone=None, image_size: int = 96,
                        policy: AugPolicy | None = None,
                        ) -> tuple[object, dict[str, list[float]]]:
    """Baseline: same backbone, same total epoch budget, no wrapper.

    All head_epochs + joint_epochs epochs train the backbone directly (it
    has no frozen phase to spend), which if anything favors the baseline.
    """
    samples = list(data)
    if not samples:
        raise ValueError("empty training set")
    rng = np.random.default_rng(seed)
    if backbone is None:
        backbone = TinyGridDetector(image_size, np.random.default_rng(seed + 2))
    opt = nn.Adam(backbone.parameters(), lr=schedule.joint_lr)
    history: dict[str, list[float]] = {"phase": [], "loss": []}
    for epoch in range(schedule.head_epochs + schedule.joint_epochs):
        loss = _epoch_pass(samples, None, backbone, None, [opt], schedule,
                           rng, policy, seed, epoch, False)
        history["phase"].append(1)
        history["loss"].append(loss)
    return backbone, history


def detect(image: np.ndarray, head: ParamHead | None, backbone,
           config: EnhanceConfig | None = None,
           confidence_threshold: float = 0.25, iou_threshold: float = 0.5,
           crop_size: int = 224,
           ) -> tuple[list[Detection], list[np.ndarray]]:
    """Thresholded, NMS-filtered detections plus classifier-ready crops.

    With a head, the image passes through the enhancement wrapper and the
    crops are cut from the enhanced image (the tensor the backbone saw).
    """
    img = np.asarray(image, dtype=np.float64)
    with ad.no_grad():
        if head is not None:
            config = config or EnhanceConfig()
            preds, _params, enhanced = wrapped_forward(img, head, backbone, config)
            source = enhanced.data[0]
        else:
            preds = backbone.forward(Tensor(img[None]))
            source = img
        decoded = backbone.decode(preds.data, confidence_threshold)[0]
    detections = nms(decoded, iou_threshold)
    crops = [crop_instance(source, det.box, crop_size) for det in detections]
    return detections, crops


def evaluate_detector(samples, head, backbone,
                      config: EnhanceConfig | None = None,
                      confidence_threshold: float = 0.25,
                      iou_threshold: float = 0.5,
                      ) -> tuple[dict[str, list], dict[str, list]]:
    """Run detection over (image, boxes) samples; returns the by-image
    detection/ground-truth mappings the metrics module consumes."""
    dets_by_image: dict[str, list] = {}
    gts_by_image: dict[str, list] = {}
    for k, (img, boxes) in enumerate(samples):
        image_id = f"s{k:05d}"
        dets, _ = detect(img, head, backbone, config,
                         confidence_threshold=confidence_threshold,
                         iou_threshold=iou_threshold, crop_size=32)
        dets_by_image[image_id] = [(d.box, d.confidence) for d in dets]
        gts_by_image[image_id] = [tuple(b) for b in np.asarray(boxes).reshape(-1, 4)]
    return dets_by_image, gts_by_image


# -- checkpoints ---------------------------------------------------------------


def save_detector_checkpoint(path: str | Path, head: ParamHead,
                             backbone: TinyGridDetector,
                             config: EnhanceConfig) -> None:
    meta = {
        "backbone_id": backbone.backbone_id,
        "image_size": backbone.image_size,
        "widths": list(backbone.widths),
        "head_config": {"downsample_size": head.config.downsample_size,
                        "conv_channels": list(head.config.conv_channels),
                        "mlp_hidden": head.config.mlp_hidden},
        "enhance_config": {k: (list(v) if isinstance(v, tuple) else v)
                           for k, v in vars(config).items()},
    }
    arrays = {f"head::{k}": v for k, v in head.state_dict().items()}
    arrays.update({f"backbone::{k}": v for k, v in backbone.state_dict().items()})
    np.savez(path, meta=json.dumps(meta), **arrays)


def load_detector_checkpoint(path: str | Path,
                             ) -> tuple[ParamHead, TinyGridDetector, EnhanceConfig]:
    blob = np.load(path, allow_pickle=False)
    meta = json.loads(str(blob["meta"]))
    if meta["backbone_id"] != TinyGridDetector.backbone_id:
        raise ValueError(f"no backbone implementation for '{meta['backbone_id']}'")
    hc = meta["head_config"]
    head = ParamHead(ParamHeadConfig(downsample_size=hc["downsample_size"],
                                     conv_channels=tuple(hc["conv_channels"]),
                                     mlp_hidden=hc["mlp_hidden"]),
                     np.random.default_rng(0))
    backbone = TinyGridDetector(meta["image_size"], np.random.default_rng(0),
                                widths=tuple(meta["widths"]))
    head.load_state_dict({k[len("head::"):]: blob[k] for k in blob.files
                          if k.startswith("head::")})
    backbone.load_state_dict({k[len("backbone::"):]: blob[k] for k in blob.files
                              if k.startswith("backbone::")})
    ec = meta["enhance_config"]
    for key in ("gamma_range", "alpha_range", "zeta_range", "defaults"):
        ec[key] = tuple(ec[key])
    return head, backbone, EnhanceConfig(**ec)
