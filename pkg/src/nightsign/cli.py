"""Command-line surface.

Subcommands: stats | split | train-detector | train-classifier | detect |
classify | eval | enhance | synth | ablate.

Exit codes: 0 success, 1 validation/usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import traceback
from pathlib import Path

import numpy as np

from .augment import RarityTable
from .classifier import (PromptBank, TriModalClassifier, embed_crops,
                         load_classifier_checkpoint,
                         save_classifier_checkpoint, train_classifier)
from .config import ConfigError, ToolkitConfig
from .dataset import (census, default_class_list, extract_crops, fold_balance,
                      load_class_list, load_folds, load_manifest, save_folds,
                      stratified_kfold)
from .detector import (TinyGridDetector, detect, evaluate_detector,
                       load_detector_checkpoint, save_detector_checkpoint,
                       train_detector)
from .enhancement import (EnhanceConfig, EnhanceParams, ParamHead,
                          ParamHeadConfig, enhance, noop_raw_scores,
                          predict_raw_params, scale_params)
from .imageops import load_image, save_image
from .metrics import (MAP_50_95_THRESHOLDS, MAP_50_THRESHOLDS,
                      classification_report, map_at)
from .synth import synth_class_names, write_detection_dataset


class ValidationError(ValueError):
    """User-input problem: bad flags, missing files, malformed data."""


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nightsign",
        description="nighttime signboard detection/classification toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stats", help="dataset census from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--class-list", default=None)

    p = sub.add_parser("split", help="stratified k-fold assignment")
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-detector", help="train the wrapped detector on one fold")
    p.add_argument("--config", required=True)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--out", default=None, help="checkpoint path (.npz)")

    p = sub.add_parser("train-classifier", help="train the crop classifier on one fold")
    p.add_argument("--config", required=True)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--variant", default=None,
                   help="full | no_cross_attention | no_prompts | no_gcnn | "
                        "no_embedding_tables")
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--out", default=None, help="checkpoint path (.npz)")

    p = sub.add_parser("detect", help="detect signboards in one image")
    p.add_argument("--image", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--confidence", type=float, default=0.25)
    p.add_argument("--out", default=None, help="detections JSON-lines path")

    p = sub.add_parser("classify", help="classify one crop image")
    p.add_argument("--crop", required=True)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("eval", help="score predictions and/or detections")
    p.add_argument("--predictions", default=None,
                   help="JSON-lines of {target, predicted}")
    p.add_argument("--class-list", default=None)
    p.add_argument("--detections", default=None,
                   help="JSON-lines of {image_id, box, confidence}")
    p.add_argument("--manifest", default=None,
                   help="ground truth for --detections")
    p.add_argument("--out", default=None, help="JSON report path")

    p = sub.add_parser("enhance", help="enhance one image, emit params sidecar")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", default=None,
                   help="detector checkpoint supplying the trained head")
    p.add_argument("--params", default=None,
                   help="explicit gamma,alpha,zeta (skips the head)")
    p.add_argument("--seed", type=int, default=0,
                   help="seed for the fresh head when no checkpoint is given")

    p = sub.add_parser("synth", help="generate a synthetic scene dataset")
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--images", type=int, default=200)
    p.add_argument("--out", required=True)
    p.add_argument("--dark", action="store_true", default=True)
    p.add_argument("--bright", dest="dark", action="store_false")
    p.add_argument("--size", type=int, default=96)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("ablate", help="train/evaluate all classifier variants")
    p.add_argument("--config", required=True)

    return parser


def _load_dataset_for(config: ToolkitConfig):
    config.resolve_paths()
    d = config["dataset"]
    class_names = (default_class_list() if d["class_list"] == "builtin"
                   else load_class_list(d["class_list"]))
    records = load_manifest(d["manifest"], class_names=class_names)
    root = Path(d["image_root"] or Path(d["manifest"]).parent)
    folds = (load_folds(d["folds"]) if d["folds"] is not None
             else stratified_kfold(records, d["k_folds"], seed=config.seed))
    return records, class_names, root, folds


def _split_fold(records, folds, fold_index):
    if not (0 <= fold_index < len(folds)):
        raise ValidationError(f"fold {fold_index} outside 0..{len(folds) - 1}")
    test_ids = set(folds[fold_index].image_ids)
    train = [r for r in records if r.image_id not in test_ids]
    test = [r for r in records if r.image_id in test_ids]
    return train, test


def cmd_stats(args) -> int:
    classes = load_class_list(args.class_list) if args.class_list else None
    records = load_manifest(args.manifest, class_names=classes)
    if not records:
        print("empty manifest")
        return 0
    cen = census(records)
    print(f"images:            {cen.n_images}")
    print(f"instances:         {cen.n_instances}")
    print(f"mean signs/image:  {cen.mean_instances_per_image:.4f}")
    print(f"classes:           {len(cen.counts)}")
    print(f"largest class:     {cen.count_max} instances")
    width = max(len(c) for c in cen.counts)
    for name, count in sorted(cen.counts.items(), key=lambda kv: -kv[1]):
        print(f"  {name:<{width}}  {count:6d}")
    return 0


def cmd_split(args) -> int:
    records = load_manifest(args.manifest)
    folds = stratified_kfold(records, args.k, seed=args.seed)
    save_folds(folds, args.out)
    balance = fold_balance(records, folds)
    sizes = [len(f.image_ids) for f in folds]
    print(f"wrote {args.out}: fold sizes {sizes}")
    print(f"worst per-class deviation from proportional: "
          f"{max(balance.values()):.2f} instances")
    return 0


def cmd_train_detector(args) -> int:
    config = ToolkitConfig.load(args.config)
    records, _classes, root, folds = _load_dataset_for(config)
    train_recs, test_recs = _split_fold(records, folds, args.fold)
    from .experiment import _scene_pairs, _pretrained_backbone_state

    pairs = _scene_pairs(train_recs, root)
    det = config["detector"]
    backbone = TinyGridDetector(det["image_size"],
                                np.random.default_rng(config.seed + 2))
    state = _pretrained_backbone_state(config)
    if state is not None:
        backbone.load_state_dict(state)
    head, backbone, history = train_detector(
        pairs, config.train_schedule(), seed=config.seed + args.fold,
        backbone=backbone, enhance_config=config.enhance_config(),
        head_config=config.head_config(), image_size=det["image_size"],
        policy=config.aug_policy(force_disabled=args.no_augment))
    dets, gts = evaluate_detector(
        _scene_pairs(test_recs, root), head, backbone, config.enhance_config(),
        confidence_threshold=det["eval_confidence_threshold"],
        iou_threshold=det["iou_threshold"])
    m50 = map_at(dets, gts, MAP_50_THRESHOLDS)
    m5095 = map_at(dets, gts, MAP_50_95_THRESHOLDS)
    print(f"fold {args.fold}: final loss {history['loss'][-1]:.4f}  "
          f"mAP@50 {m50:.4f}  mAP@50:95 {m5095:.4f}")
    out = args.out or (config.output_dir / f"detector_fold{args.fold}.npz")
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    save_detector_checkpoint(out, head, backbone, config.enhance_config())
    print(f"checkpoint: {out}")
    return 0


def cmd_train_classifier(args) -> int:
    config = ToolkitConfig.load(args.config)
    records, class_names, root, folds = _load_dataset_for(config)
    train_recs, test_recs = _split_fold(records, folds, args.fold)
    crop_size = config["classifier"]["crop_size"]
    provider = config.provider(class_names)
    train_pairs = extract_crops(train_recs, crop_size, image_root=root)
    test_pairs = extract_crops(test_recs, crop_size, image_root=root)
    train_crops = [c for c, _ in train_pairs]
    train_labels = np.array([class_names.index(n) for _, n in train_pairs])
    test_crops = [c for c, _ in test_pairs]
    test_labels = np.array([class_names.index(n) for _, n in test_pairs])

    policy = config.aug_policy(force_disabled=args.no_augment)
    if policy.enabled:
        from .augment import apply_augmentations

        table = RarityTable.from_census(census(train_recs), policy)
        train_crops = [
            apply_augmentations(crop, class_names[label], policy, table,
                                rng_seed=hash((config.seed, i)) % 2 ** 32)
            for i, (crop, label) in enumerate(zip(train_crops, train_labels))]
    if hasattr(provider, "register") and provider.labeler is None:
        for crop, label in zip(train_crops + test_crops,
                               np.concatenate([train_labels, test_labels])):
            provider.register(crop, int(label))
    bank = PromptBank.build(provider)
    counts = census(train_recs).counts
    inv = np.array([1.0 / np.sqrt(counts.get(n, 1)) for n in class_names])
    alpha = inv / inv.sum() * len(class_names)
    model = TriModalClassifier(
        config.fusion_config(len(class_names)), provider, bank,
        np.random.default_rng(config.seed + 3),
        variant=args.variant or config["classifier"]["variant"])
    history = train_classifier(model, embed_crops(train_crops, provider),
                               train_labels, alpha,
                               config.classifier_train_config())
    logits = model.forward_embeddings(embed_crops(test_crops, provider))
    preds = [class_names[i] for i in logits.data.argmax(axis=1)]
    targets = [class_names[i] for i in test_labels]
    report = classification_report(preds, targets, class_names)
    print(f"fold {args.fold} ({model.variant}): train acc "
          f"{history['accuracy'][-1]:.4f}  test A.P. {report.macro_precision:.4f}  "
          f"A.R. {report.macro_recall:.4f}  Acc {report.accuracy:.4f}")
    out = args.out or (config.output_dir / f"classifier_fold{args.fold}.npz")
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    save_classifier_checkpoint(out, model, class_names)
    print(f"checkpoint: {out}")
    return 0


def cmd_detect(args) -> int:
    if not Path(args.image).is_file():
        raise ValidationError(f"image not found: {args.image}")
    if not Path(args.checkpoint).is_file():
        raise ValidationError(f"checkpoint not found: {args.checkpoint}")
    head, backbone, cfg = load_detector_checkpoint(args.checkpoint)
    image = load_image(args.image)
    detections, _crops = detect(image, head, backbone, cfg,
                                confidence_threshold=args.confidence)
    lines = [json.dumps({"box": list(d.box), "confidence": d.confidence,
                         "class_index": d.class_index})
             for d in detections]
    text = "\n".join(lines) + ("\n" if lines else "")
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    print(f"{len(detections)} detections", file=sys.stderr)
    return 0


def cmd_classify(args) -> int:
    if not Path(args.crop).is_file():
        raise ValidationError(f"crop not found: {args.crop}")
    if not Path(args.checkpoint).is_file():
        raise ValidationError(f"checkpoint not found: {args.checkpoint}")
    blob = np.load(args.checkpoint, allow_pickle=False)
    meta = json.loads(str(blob["meta"]))
    provider_id = meta["provider_id"]
    if not provider_id.startswith("stub-"):
        raise ValidationError(f"cannot reconstruct provider '{provider_id}'")
    dim = int(provider_id.split("-d")[1].split("-")[0])
    seed = int(provider_id.rsplit("-s", 1)[1])
    from .classifier import StubEmbeddingProvider
    from .synth import nearest_template_labeler

    labeler = None
    if meta.get("provider_labeler") == "nearest_template":
        labeler = nearest_template_labeler(meta["class_list"])
    provider = StubEmbeddingProvider(dim=dim, seed=seed, labeler=labeler,
                                     labeler_kind=meta.get("provider_labeler"))
    model, class_names = load_classifier_checkpoint(args.checkpoint, provider)
    crop = load_image(args.crop)
    logits = model.classify_crop(crop)
    probs = np.exp(logits - logits.max())
    probs /= probs.sum()
    idx = int(np.argmax(probs))
    print(json.dumps({"class_name": class_names[idx],
                      "probability": float(probs[idx])}))
    return 0


def cmd_eval(args) -> int:
    if args.predictions is None and args.detections is None:
        raise ValidationError("eval needs --predictions and/or --detections")
    report: dict = {}
    if args.predictions is not None:
        if not Path(args.predictions).is_file():
            raise ValidationError(f"predictions not found: {args.predictions}")
        pairs = [json.loads(line) for line in
                 Path(args.predictions).read_text().splitlines() if line.strip()]
        try:
            targets = [p["target"] for p in pairs]
            preds = [p["predicted"] for p in pairs]
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"bad predictions record: {exc}") from exc
        classes = (load_class_list(args.class_list) if args.class_list
                   else sorted(set(targets) | set(preds)))
        cls_report = classification_report(preds, targets, classes)
        print(cls_report.format_table())
        report["classification"] = cls_report.to_dict()
    if args.detections is not None:
        if args.manifest is None:
            raise ValidationError("--detections needs --manifest ground truth")
        records = load_manifest(args.manifest)
        gts = {r.image_id: [tuple(i.box) for i in r.instances] for r in records}
        dets: dict[str, list] = {image_id: [] for image_id in gts}
        for line in Path(args.detections).read_text().splitlines():
            if not line.strip():
                continue
            d = json.loads(line)
            if d["image_id"] not in dets:
                raise ValidationError(f"detection for unknown image "
                                      f"'{d['image_id']}'")
            dets[d["image_id"]].append((tuple(d["box"]), float(d["confidence"])))
        m50 = map_at(dets, gts, MAP_50_THRESHOLDS)
        m5095 = map_at(dets, gts, MAP_50_95_THRESHOLDS)
        print(f"mAP@50    {m50:.4f}")
        print(f"mAP@50:95 {m5095:.4f}")
        report["detection"] = {"map50": m50, "map50_95": m5095}
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True)
                                  + "\n")
    return 0


def cmd_enhance(args) -> int:
    if not Path(args.image).is_file():
        raise ValidationError(f"image not found: {args.image}")
    image = load_image(args.image)
    cfg = EnhanceConfig()
    if args.params is not None:
        try:
            g, a, z = (float(v) for v in args.params.split(","))
        except ValueError as exc:
            raise ValidationError("--params must be gamma,alpha,zeta") from exc
        params = EnhanceParams(g, a, z)
    else:
        if args.checkpoint is not None:
            if not Path(args.checkpoint).is_file():
                raise ValidationError(f"checkpoint not found: {args.checkpoint}")
            head, _backbone, cfg = load_detector_checkpoint(args.checkpoint)
        else:
            head = ParamHead(ParamHeadConfig(), np.random.default_rng(args.seed),
                             output_bias=noop_raw_scores(cfg))
        z_raw = predict_raw_params(image, head)
        params = scale_params(z_raw.data, cfg)
    out = enhance(image, params, cfg)
    save_image(args.out, out)
    g, a, z = params.values()
    sidecar = Path(args.out).with_suffix(".json")
    sidecar.write_text(json.dumps({"gamma": float(g), "alpha": float(a),
                                   "zeta": float(z)}, indent=2, sort_keys=True)
                       + "\n")
    print(f"wrote {args.out} and {sidecar}")
    return 0


def cmd_synth(args) -> int:
    if args.classes < 1 or args.images < 1:
        raise ValidationError("--classes and --images must be positive")
    names = synth_class_names(args.classes)
    manifest, records = write_detection_dataset(
        args.out, args.images, names, size=args.size, seed=args.seed,
        dark=args.dark)
    print(f"wrote {len(records)} images under {args.out}")
    print(f"manifest: {manifest}")
    return 0


def cmd_ablate(args) -> int:
    from .experiment import run_ablation

    config = ToolkitConfig.load(args.config)
    config.resolve_paths()
    results = run_ablation(config)
    metrics = ("macro_precision", "macro_recall", "accuracy")
    width = max(len(v) for v in results)
    print(f"{'variant':<{width}}  " + "  ".join(f"{m:>16}" for m in metrics))
    for name, vals in results.items():
        print(f"{name:<{width}}  "
              + "  ".join(f"{vals[m]:16.4f}" for m in metrics))
    print(f"plots and JSON under {config.output_dir}")
    return 0


_HANDLERS = {
    "stats": cmd_stats,
    "split": cmd_split,
    "train-detector": cmd_train_detector,
    "train-classifier": cmd_train_classifier,
    "detect": cmd_detect,
    "classify": cmd_classify,
    "eval": cmd_eval,
    "enhance": cmd_enhance,
    "synth": cmd_synth,
    "ablate": cmd_ablate,
}


def run_command(argv: list[str] | None = None) -> int:
    """Execute one subcommand; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage problems; map onto the validation code
        return 0 if exc.code == 0 else 1
    try:
        return _HANDLERS[args.command](args)
    except (ValidationError, ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
