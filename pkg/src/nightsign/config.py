"""Toolkit configuration: one JSON document with nested sections.

The canonical serialization (sorted keys, two-space indent, trailing
newline) makes serialize -> parse -> serialize byte-identical, and the
config hash is the sha256 of that text. Unknown keys anywhere in the
document are rejected so typos fail loudly.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .augment import AugPolicy
from .classifier import (ClassifierTrainConfig, FusionConfig,
                         StubEmbeddingProvider)
from .detector import TrainSchedule
from .enhancement import EnhanceConfig, ParamHeadConfig
from .synth import nearest_template_labeler

DEFAULTS: dict = {
    "seed": 0,
    "output_dir": "runs/experiment",
    "dataset": {
        "manifest": None,
        "class_list": "builtin",
        "image_root": None,
        "folds": None,
        "k_folds": 5,
    },
    "enhance": {
        "gamma_range": [0.3, 3.0],
        "alpha_range": [0.3, 4.0],
        "zeta_range": [0.0, 1.2],
        "epsilon": 1e-4,
        "sigma_u": 1.0,
        "lambda_gamma": 1e-3,
        "lambda_alpha": 1e-3,
        "lambda_zeta": 5e-3,
    },
    "augment": {
        "enabled": True,
        "type_weights": {"photometric": 1.0, "jpeg": 0.9, "gaussian_noise": 0.8,
                         "blur": 0.6, "rotation": 0.5},
        "p_base": 0.15,
        "p_scale": 0.75,
        "jitter_range": [0.7, 1.3],
        "jpeg_quality": [30, 90],
        "noise_sigma": [0.01, 0.05],
        "blur_sigma": [0.5, 2.0],
        "rotation_degrees": [-5.0, 5.0],
    },
    "detector": {
        "image_size": 96,
        "downsample_size": 64,
        "head_epochs": 10,
        "joint_epochs": 50,
        "head_lr": 1e-3,
        "joint_lr": 1e-4,
        "joint_head_lr": None,
        "batch_size": 32,
        "pretrain_epochs": 0,
        "pretrain_images": 160,
        "pretrain_lr": 2e-3,
        "confidence_threshold": 0.25,
        "iou_threshold": 0.5,
        "eval_confidence_threshold": 0.1,
    },
    "classifier": {
        "dim": 64,
        "n_heads": 8,
        "gcnn_layers": 3,
        "self_loops": True,
        "gcnn_relu": False,
        "dropout": 0.2,
        "crop_size": 224,
        "epochs": 50,
        "batch_size": 64,
        "learning_rate": 1e-4,
        "weight_decay": 1e-5,
        "gamma_focal": 2.0,
        "variant": "full",
        "provider": {"kind": "stub", "seed": 0, "cluster_strength": 2.0,
                     "content_labeler": False},
    },
}


class ConfigError(ValueError):
    """Bad key, bad value, or unresolvable path in a toolkit config."""


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key '{here}'")
        if isinstance(base[key], dict) and key != "type_weights":
            if not isinstance(value, dict):
                raise ConfigError(f"'{here}' must be a section")
            out[key] = _merge(base[key], value, here)
        else:
            out[key] = copy.deepcopy(value)
    return out


def canonical_json(document: dict) -> str:
    return json.dumps(document, indent=2, sort_keys=True) + "\n"


@dataclass
class ToolkitConfig:
    document: dict

    @classmethod
    def default(cls, **overrides) -> "ToolkitConfig":
        return cls(document=_merge(DEFAULTS, overrides))

    @classmethod
    def from_dict(cls, raw: dict) -> "ToolkitConfig":
        return cls(document=_merge(DEFAULTS, raw))

    @classmethod
    def load(cls, path: str | Path) -> "ToolkitConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(raw)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    def to_json(self) -> str:
        return canonical_json(self.document)

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def __getitem__(self, key: str):
        return self.document[key]

    @property
    def seed(self) -> int:
        return int(self.document["seed"])

    @property
    def output_dir(self) -> Path:
        return Path(self.document["output_dir"])

    # -- typed views -----------------------------------------------------------

    def enhance_config(self) -> EnhanceConfig:
        e = self.document["enhance"]
        return EnhanceConfig(
            gamma_range=tuple(e["gamma_range"]),
            alpha_range=tuple(e["alpha_range"]),
            zeta_range=tuple(e["zeta_range"]),
            epsilon=e["epsilon"], sigma_u=e["sigma_u"],
            lambda_gamma=e["lambda_gamma"], lambda_alpha=e["lambda_alpha"],
            lambda_zeta=e["lambda_zeta"])

    def aug_policy(self, force_disabled: bool = False) -> AugPolicy:
        a = self.document["augment"]
        return AugPolicy(
            type_weights=dict(a["type_weights"]),
            p_base=a["p_base"], p_scale=a["p_scale"],
            jitter_range=tuple(a["jitter_range"]),
            jpeg_quality=tuple(a["jpeg_quality"]),
            noise_sigma=tuple(a["noise_sigma"]),
            blur_sigma=tuple(a["blur_sigma"]),
            rotation_degrees=tuple(a["rotation_degrees"]),
            enabled=bool(a["enabled"]) and not force_disabled)

    def train_schedule(self) -> TrainSchedule:
        d = self.document["detector"]
        return TrainSchedule(
            head_epochs=d["head_epochs"], joint_epochs=d["joint_epochs"],
            head_lr=d["head_lr"], joint_lr=d["joint_lr"],
            joint_head_lr=d["joint_head_lr"], batch_size=d["batch_size"])

    def head_config(self) -> ParamHeadConfig:
        return ParamHeadConfig(downsample_size=self.document["detector"]
                               ["downsample_size"])

    def fusion_config(self, n_classes: int) -> FusionConfig:
        c = self.document["classifier"]
        return FusionConfig(
            dim=c["dim"], n_heads=c["n_heads"], gcnn_layers=c["gcnn_layers"],
            self_loops=c["self_loops"], gcnn_relu=c["gcnn_relu"],
            dropout=c["dropout"], n_classes=n_classes)

    def classifier_train_config(self) -> ClassifierTrainConfig:
        c = self.document["classifier"]
        return ClassifierTrainConfig(
            epochs=c["epochs"], batch_size=c["batch_size"],
            learning_rate=c["learning_rate"], weight_decay=c["weight_decay"],
            gamma_focal=c["gamma_focal"], seed=self.seed)

    def provider(self, class_names: list[str] | None = None):
        p = self.document["classifier"]["provider"]
        if p["kind"] != "stub":
            raise ConfigError(f"no provider implementation for kind '{p['kind']}'"
                              " (plug an object satisfying EmbeddingProvider)")
        labeler = None
        if p.get("content_labeler") and class_names is not None:
            labeler = nearest_template_labeler(class_names)
        return StubEmbeddingProvider(dim=self.document["classifier"]["dim"],
                                     seed=p["seed"],
                                     cluster_strength=p["cluster_strength"],
                                     labeler=labeler,
                                     labeler_kind="nearest_template"
                                     if labeler else None)

    def resolve_paths(self, require_manifest: bool = True) -> None:
        d = self.document["dataset"]
        if d["manifest"] is None:
            if require_manifest:
                raise ConfigError("dataset.manifest is not set")
            return
        if not Path(d["manifest"]).is_file():
            raise ConfigError(f"manifest not found: {d['manifest']}")
        if d["class_list"] != "builtin" and not Path(d["class_list"]).is_file():
            raise ConfigError(f"class list not found: {d['class_list']}")
        if d["folds"] is not None and not Path(d["folds"]).is_file():
            raise ConfigError(f"fold file not found: {d['folds']}")
