"""Experiment orchestration: k-fold cross-validation over both pipeline
stages, ablation sweeps, record persistence, and plot emission.

Every run writes into its own output directory: the exact config text
(hash-verified), a JSON record, an append-only `experiments.jsonl` log,
and the fold/ablation plots.
"""

from __future__ import annotations

import json
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

from . import __version__  # noqa: E402
from .augment import RarityTable  # noqa: E402
from .classifier import (ABLATION_VARIANTS, PromptBank,  # noqa: E402
                         TriModalClassifier, class_alpha_weights, embed_crops,
                         train_classifier)
from .config import ToolkitConfig  # noqa: E402
from .dataset import (AnnotationRecord, census, crop_instance,  # noqa: E402
                      default_class_list, load_class_list, load_folds,
                      load_manifest, stratified_kfold)
from .detector import (TinyGridDetector, evaluate_detector,  # noqa: E402
                       train_backbone_only, train_detector)
from .imageops import load_image  # noqa: E402
from .metrics import (MAP_50_95_THRESHOLDS, MAP_50_THRESHOLDS,  # noqa: E402
                      classification_report, map_at)

FOLD_METRIC_NAMES = ("map50", "map50_95", "macro_precision", "macro_recall",
                     "accuracy")


@dataclass
class ExperimentRecord:
    config_hash: str
    config_text: str
    fold_metrics: list[dict[str, float]] = field(default_factory=list)
    aggregates: dict[str, dict[str, float]] = field(default_factory=dict)
    wallclock_seconds: float = 0.0
    environment: dict[str, str] = field(default_factory=dict)
    failed_fold: int | None = None
    error: str | None = None

    def to_json(self) -> str:
        return json.dumps({
            "config_hash": self.config_hash,
            "fold_metrics": self.fold_metrics,
            "aggregates": self.aggregates,
            "wallclock_seconds": self.wallclock_seconds,
            "environment": self.environment,
            "failed_fold": self.failed_fold,
            "error": self.error,
        }, indent=2, sort_keys=True) + "\n"


def _environment() -> dict[str, str]:
    return {
        "python": sys.version.split()[0],
        "numpy": np.__version__,
        "platform": platform.platform(),
        "toolkit": __version__,
    }


def aggregate_folds(fold_metrics: list[dict[str, float]]) -> dict[str, dict[str, float]]:
    """Mean and spread (population std) per metric over folds."""
    out = {}
    for name in FOLD_METRIC_NAMES:
        values = np.array([m[name] for m in fold_metrics])
        out[name] = {"mean": float(values.mean()),
                     "std": float(values.std()),
                     "min": float(values.min()),
                     "max": float(values.max())}
    return out


def _load_dataset(config: ToolkitConfig):
    d = config["dataset"]
    class_names = (default_class_list() if d["class_list"] == "builtin"
                   else load_class_list(d["class_list"]))
    records = load_manifest(d["manifest"], class_names=class_names)
    root = d["image_root"] or Path(d["manifest"]).parent
    return records, class_names, Path(root)


def _scene_pairs(records: list[AnnotationRecord], root: Path):
    pairs = []
    for rec in records:
        path = Path(rec.image_path)
        if not path.is_absolute():
            path = root / path
        image = load_image(path)
        boxes = np.array([inst.box for inst in rec.instances]).reshape(-1, 4)
        pairs.append((image, boxes))
    return pairs


def _crop_set(records: list[AnnotationRecord], root: Path, crop_size: int,
              class_names: list[str]):
    crops, labels = [], []
    for rec in sorted(records, key=lambda r: r.image_id):
        if not rec.instances:
            continue
        path = Path(rec.image_path)
        if not path.is_absolute():
            path = root / path
        image = load_image(path)
        for inst in rec.instances:
            crops.append(crop_instance(image, inst.box, crop_size))
            labels.append(class_names.index(inst.class_name))
    return crops, np.array(labels, dtype=int)


def _pretrained_backbone_state(config: ToolkitConfig):
    """Generic detection competence from synthetic bright scenes (never
    the user's data, so the evaluation folds stay untouched)."""
    from .detector import TrainSchedule
    from .synth import generate_detection_set, synth_class_names

    det = config["detector"]
    if det["pretrain_epochs"] <= 0:
        return None
    scenes = generate_detection_set(det["pretrain_images"], synth_class_names(6),
                                    size=det["image_size"],
                                    seed=config.seed + 1000, dark=False)
    pairs = [(s.image, s.boxes) for s in scenes]
    sched = TrainSchedule(head_epochs=0, joint_epochs=det["pretrain_epochs"],
                          joint_lr=det["pretrain_lr"],
                          batch_size=det["batch_size"])
    backbone, _ = train_backbone_only(pairs, sched, seed=config.seed + 1000,
                                      image_size=det["image_size"])
    return backbone.state_dict()


def detection_fold_metrics(config: ToolkitConfig, train_recs, test_recs,
                           root: Path, fold_seed: int,
                           backbone_state: dict | None = None,
                           ) -> dict[str, float]:
    det = config["detector"]
    train_pairs = _scene_pairs(train_recs, root)
    test_pairs = _scene_pairs(test_recs, root)
    backbone = TinyGridDetector(det["image_size"],
                                np.random.default_rng(fold_seed + 2))
    if backbone_state is not None:
        backbone.load_state_dict(backbone_state)
    head, backbone, _ = train_detector(
        train_pairs, config.train_schedule(), seed=fold_seed,
        backbone=backbone, enhance_config=config.enhance_config(),
        head_config=config.head_config(), image_size=det["image_size"],
        policy=config.aug_policy())
    dets, gts = evaluate_detector(
        test_pairs, head, backbone, config.enhance_config(),
        confidence_threshold=det["eval_confidence_threshold"],
        iou_threshold=det["iou_threshold"])
    return {"map50": map_at(dets, gts, MAP_50_THRESHOLDS),
            "map50_95": map_at(dets, gts, MAP_50_95_THRESHOLDS)}


def classification_fold_metrics(config: ToolkitConfig, train_recs, test_recs,
                                root: Path, class_names, fold_seed: int,
                                variant: str | None = None) -> dict[str, float]:
    crop_size = config["classifier"]["crop_size"]
    provider = config.provider(class_names)
    train_crops, train_labels = _crop_set(train_recs, root, crop_size, class_names)
    test_crops, test_labels = _crop_set(test_recs, root, crop_size, class_names)
    if hasattr(provider, "register") and provider.labeler is None:
        for crop, label in zip(train_crops + test_crops,
                               np.concatenate([train_labels, test_labels])):
            provider.register(crop, int(label))
    bank = PromptBank.build(provider)
    # inverse-sqrt weights over the train census; classes absent from the
    # train folds fall back to unit inverse frequency
    counts = census(train_recs).counts
    inv = np.array([1.0 / np.sqrt(counts.get(name, 1)) for name in class_names])
    alpha = inv / inv.sum() * len(class_names)
    model = TriModalClassifier(config.fusion_config(len(class_names)), provider,
                               bank, np.random.default_rng(fold_seed + 3),
                               variant=variant or config["classifier"]["variant"])
    train_classifier(model, embed_crops(train_crops, provider), train_labels,
                     alpha, config.classifier_train_config())
    logits = model.forward_embeddings(embed_crops(test_crops, provider))
    predictions = [class_names[i] for i in logits.data.argmax(axis=1)]
    targets = [class_names[i] for i in test_labels]
    report = classification_report(predictions, targets, class_names)
    return {"macro_precision": report.macro_precision,
            "macro_recall": report.macro_recall,
            "accuracy": report.accuracy}


def run_fold(config: ToolkitConfig, records, class_names, root: Path,
             train_ids: set[str], test_ids: set[str], fold_seed: int,
             variant: str | None = None,
             backbone_state: dict | None = None) -> dict[str, float]:
    """Train detector and classifier on the train split, score the test
    split; returns the five headline metrics."""
    train_recs = [r for r in records if r.image_id in train_ids]
    test_recs = [r for r in records if r.image_id in test_ids]
    metrics = detection_fold_metrics(config, train_recs, test_recs, root,
                                     fold_seed, backbone_state)
    metrics.update(classification_fold_metrics(config, train_recs, test_recs,
                                               root, class_names, fold_seed,
                                               variant))
    return metrics


def run_crossval(config: ToolkitConfig) -> ExperimentRecord:
    """Stratified k-fold training/evaluation of both stages.

    Any fold failure aborts the run but the partial record (completed
    folds, the error, the offending fold index) is still written.
    """
    started = time.time()
    out_dir = config.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(config.to_json())
    record = ExperimentRecord(config_hash=config.config_hash,
                              config_text=config.to_json(),
                              environment=_environment())
    try:
        records, class_names, root = _load_dataset(config)
        d = config["dataset"]
        if d["folds"] is not None:
            folds = load_folds(d["folds"])
        else:
            folds = stratified_kfold(records, d["k_folds"], seed=config.seed)
        pretrain_state = _pretrained_backbone_state(config)
        all_ids = {r.image_id for r in records}
        for fold in folds:
            test_ids = set(fold.image_ids)
            metrics = run_fold(config, records, class_names, root,
                               all_ids - test_ids, test_ids,
                               fold_seed=config.seed + fold.fold_index,
                               backbone_state=pretrain_state)
            record.fold_metrics.append(metrics)
    except Exception as exc:
        record.failed_fold = len(record.fold_metrics)
        record.error = f"{type(exc).__name__}: {exc}"
        record.wallclock_seconds = time.time() - started
        _persist(record, out_dir)
        raise
    record.aggregates = aggregate_folds(record.fold_metrics)
    record.wallclock_seconds = time.time() - started
    _persist(record, out_dir)
    fold_boxplot(record.fold_metrics, out_dir / "folds_boxplot.png")
    return record


def _persist(record: ExperimentRecord, out_dir: Path) -> None:
    (out_dir / "record.json").write_text(record.to_json())
    with (out_dir / "experiments.jsonl").open("a") as fh:
        fh.write(json.dumps({"config_hash": record.config_hash,
                             "aggregates": record.aggregates,
                             "failed_fold": record.failed_fold,
                             "wallclock_seconds": record.wallclock_seconds}) + "\n")


def verify_record_config(out_dir: str | Path) -> bool:
    """True when the stored config's hash matches the stored record."""
    import hashlib

    out_dir = Path(out_dir)
    text = (out_dir / "config.json").read_text()
    stored = json.loads((out_dir / "record.json").read_text())["config_hash"]
    return hashlib.sha256(text.encode()).hexdigest() == stored


def run_ablation(config: ToolkitConfig,
                 variants: tuple[str, ...] = ABLATION_VARIANTS,
                 ) -> dict[str, dict[str, float]]:
    """Train/evaluate every classifier variant on fold 0 of the split.

    Detection metrics are shared across variants (the detector is not
    ablated), so only the classification arm is retrained per variant.
    """
    out_dir = config.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(config.to_json())
    records, class_names, root = _load_dataset(config)
    folds = stratified_kfold(records, config["dataset"]["k_folds"],
                             seed=config.seed)
    test_ids = set(folds[0].image_ids)
    train_recs = [r for r in records if r.image_id not in test_ids]
    test_recs = [r for r in records if r.image_id in test_ids]
    results: dict[str, dict[str, float]] = {}
    for variant in variants:
        results[variant] = classification_fold_metrics(
            config, train_recs, test_recs, root, class_names,
            fold_seed=config.seed, variant=variant)
    (out_dir / "ablation.json").write_text(
        json.dumps(results, indent=2, sort_keys=True) + "\n")
    ablation_bars(results, out_dir / "ablation_bars.png")
    return results


# -- plots ---------------------------------------------------------------------


def fold_boxplot(fold_metrics: list[dict[str, float]], path: str | Path) -> None:
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    det = [[m["map50"] for m in fold_metrics],
           [m["map50_95"] for m in fold_metrics]]
    axes[0].boxplot(det, tick_labels=["mAP@50", "mAP@50:95"])
    axes[0].set_title("detection (per fold)")
    cls = [[m["macro_precision"] for m in fold_metrics],
           [m["macro_recall"] for m in fold_metrics],
           [m["accuracy"] for m in fold_metrics]]
    axes[1].boxplot(cls, tick_labels=["A.P.", "A.R.", "Acc."])
    axes[1].set_title("classification (per fold)")
    for ax in axes:
        ax.set_ylim(0, 1.05)
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def ablation_bars(results: dict[str, dict[str, float]], path: str | Path) -> None:
    names = list(results)
    metrics = ("macro_precision", "macro_recall", "accuracy")
    x = np.arange(len(names))
    width = 0.25
    fig, ax = plt.subplots(figsize=(10, 4))
    for k, metric in enumerate(metrics):
        ax.bar(x + (k - 1) * width, [results[n][metric] for n in names],
               width, label=metric)
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=20, ha="right")
    ax.set_ylim(0, 1.05)
    ax.legend()
    ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
