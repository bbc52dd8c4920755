"""Manifest ingestion, stratified k-fold splitting, dataset statistics,
and crop extraction.

Manifests are JSON-lines, one image record per line:

    {"image_id": "...", "image_path": "...", "width": W, "height": H,
     "instances": [{"box": [x_min, y_min, x_max, y_max],
                    "class_name": "...", "attributes": [...]}],
     "tags": [...]}

``tags`` and per-instance ``attributes`` may be omitted (empty by
default); every other field is mandatory, and unknown fields are
rejected. A single malformed line rejects the whole file with the line
number in the error.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .imageops import letterbox_square, load_image, resize_bilinear_np

ATTRIBUTE_FLAGS = frozenset(
    {"tampered", "unknown", "advertisement", "warning", "occluded", "out_of_frame"})

_RECORD_FIELDS = {"image_id", "image_path", "width", "height", "instances", "tags"}
_INSTANCE_FIELDS = {"box", "class_name", "attributes"}


class ManifestError(ValueError):
    """Schema or invariant violation while reading a manifest."""


@dataclass(frozen=True)
class SignInstance:
    box: tuple[float, float, float, float]  # x_min, y_min, x_max, y_max (pixels)
    class_name: str
    attribute_flags: frozenset[str] = frozenset()


@dataclass(frozen=True)
class AnnotationRecord:
    image_id: str
    image_path: str
    width: int
    height: int
    instances: tuple[SignInstance, ...] = ()
    capture_tags: frozenset[str] = frozenset()


@dataclass(frozen=True)
class FoldAssignment:
    fold_index: int
    image_ids: tuple[str, ...]


@dataclass
class ClassCensus:
    counts: dict[str, int]
    n_images: int
    n_instances: int

    @property
    def count_max(self) -> int:
        return max(self.counts.values())

    @property
    def mean_instances_per_image(self) -> float:
        return self.n_instances / self.n_images


def default_class_list() -> list[str]:
    """The bundled 41-class nighttime signboard taxonomy."""
    text = resources.files("nightsign.data").joinpath("intsd_classes.txt").read_text()
    return [line.strip() for line in text.splitlines() if line.strip()]


def load_class_list(path: str | Path) -> list[str]:
    lines = Path(path).read_text().splitlines()
    classes = [ln.strip() for ln in lines if ln.strip()]
    if len(set(classes)) != len(classes):
        raise ValueError("class list contains duplicates")
    return classes


def _parse_instance(raw: dict, width: int, height: int, line_no: int,
                    class_names: list[str] | None) -> SignInstance:
    if not isinstance(raw, dict):
        raise ManifestError(f"line {line_no}: instance is not an object")
    unknown = set(raw) - _INSTANCE_FIELDS
    if unknown:
        raise ManifestError(f"line {line_no}: unknown instance fields {sorted(unknown)}")
    for req in ("box", "class_name"):
        if req not in raw:
            raise ManifestError(f"line {line_no}: instance missing '{req}'")
    box = raw["box"]
    if (not isinstance(box, (list, tuple)) or len(box) != 4
            or not all(isinstance(v, (int, float)) for v in box)):
        raise ManifestError(f"line {line_no}: 'box' must be 4 numbers")
    x0, y0, x1, y1 = (float(v) for v in box)
    if not (x0 < x1):
        raise ManifestError(f"line {line_no}: box has x_min >= x_max")
    if not (y0 < y1):
        raise ManifestError(f"line {line_no}: box has y_min >= y_max")
    if x0 < 0 or y0 < 0 or x1 > width or y1 > height:
        raise ManifestError(
            f"line {line_no}: box {box} outside image bounds {width}x{height}")
    name = raw["class_name"]
    if not isinstance(name, str) or not name:
        raise ManifestError(f"line {line_no}: 'class_name' must be a non-empty string")
    if class_names is not None and name not in class_names:
        raise ManifestError(f"line {line_no}: unknown class_name '{name}'")
    attrs = raw.get("attributes", [])
    if not isinstance(attrs, list) or not all(isinstance(a, str) for a in attrs):
        raise ManifestError(f"line {line_no}: 'attributes' must be a list of strings")
    bad = set(attrs) - ATTRIBUTE_FLAGS
    if bad:
        raise ManifestError(f"line {line_no}: unknown attribute flags {sorted(bad)}")
    return SignInstance(box=(x0, y0, x1, y1), class_name=name,
                        attribute_flags=frozenset(attrs))


def load_manifest(path: str | Path,
                  class_names: list[str] | None = None) -> list[AnnotationRecord]:
    """Parse a JSON-lines manifest, validating every record.

    Raises FileNotFoundError for a missing file and :class:`ManifestError`
    (with the offending line number) for any schema violation; nothing is
    returned from a file with even one bad line.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    records: list[AnnotationRecord] = []
    seen_ids: set[str] = set()
    with path.open() as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"line {line_no}: invalid JSON ({exc.msg})") from exc
            if not isinstance(raw, dict):
                raise ManifestError(f"line {line_no}: record is not an object")
            unknown = set(raw) - _RECORD_FIELDS
            if unknown:
                raise ManifestError(f"line {line_no}: unknown fields {sorted(unknown)}")
            for req in ("image_id", "image_path", "width", "height", "instances"):
                if req not in raw:
                    raise ManifestError(f"line {line_no}: missing field '{req}'")
            image_id = raw["image_id"]
            if not isinstance(image_id, str) or not image_id:
                raise ManifestError(f"line {line_no}: 'image_id' must be a non-empty string")
            if image_id in seen_ids:
                raise ManifestError(f"line {line_no}: duplicate image_id '{image_id}'")
            seen_ids.add(image_id)
            width, height = raw["width"], raw["height"]
            if not (isinstance(width, int) and isinstance(height, int)
                    and width > 0 and height > 0):
                raise ManifestError(f"line {line_no}: width/height must be positive ints")
            if not isinstance(raw["instances"], list):
                raise ManifestError(f"line {line_no}: 'instances' must be a list")
            instances = tuple(
                _parse_instance(inst, width, height, line_no, class_names)
                for inst in raw["instances"])
            tags = raw.get("tags", [])
            if not isinstance(tags, list) or not all(isinstance(t, str) for t in tags):
                raise ManifestError(f"line {line_no}: 'tags' must be a list of strings")
            records.append(AnnotationRecord(
                image_id=image_id, image_path=str(raw["image_path"]),
                width=width, height=height, instances=instances,
                capture_tags=frozenset(tags)))
    return records


def save_manifest(records: list[AnnotationRecord], path: str | Path) -> None:
    with Path(path).open("w") as fh:
        for rec in records:
            fh.write(json.dumps({
                "image_id": rec.image_id,
                "image_path": rec.image_path,
                "width": rec.width,
                "height": rec.height,
                "instances": [{
                    "box": list(inst.box),
                    "class_name": inst.class_name,
                    "attributes": sorted(inst.attribute_flags),
                } for inst in rec.instances],
                "tags": sorted(rec.capture_tags),
            }) + "\n")


def census(records: list[AnnotationRecord]) -> ClassCensus:
    """Per-class instance counts plus image/instance totals."""
    if not records:
        raise ValueError("census needs a non-empty record list")
    counts: Counter[str] = Counter()
    n_instances = 0
    for rec in records:
        for inst in rec.instances:
            counts[inst.class_name] += 1
            n_instances += 1
    return ClassCensus(counts=dict(counts), n_images=len(records),
                       n_instances=n_instances)


def stratified_kfold(records: list[AnnotationRecord], k: int,
                     seed: int) -> list[FoldAssignment]:
    """Greedy stratified split of whole images into k folds.

    Images are ordered rarest-class-first (seeded shuffle breaks ties) and
    each is assigned to the fold currently holding the fewest instances of
    that image's rarest class; further ties go to the fold with fewer
    images, then the lower index. Deterministic given (records, k, seed).
    """
    if k < 2:
        raise ValueError("k must be at least 2")
    if k > len(records):
        raise ValueError(f"k={k} exceeds image count {len(records)}")
    totals = census(records).counts if any(r.instances for r in records) else {}

    def rarest(rec: AnnotationRecord) -> str | None:
        names = {i.class_name for i in rec.instances}
        if not names:
            return None
        return min(names, key=lambda c: (totals[c], c))

    rng = np.random.default_rng(seed)
    order = list(records)
    rng.shuffle(order)
    order.sort(key=lambda r: totals.get(rarest(r), 0) if rarest(r) else len(records) + 1)

    fold_class: list[Counter[str]] = [Counter() for _ in range(k)]
    fold_sizes = [0] * k
    assignment: list[list[str]] = [[] for _ in range(k)]
    for rec in order:
        target = rarest(rec)
        if target is None:
            best = min(range(k), key=lambda f: (fold_sizes[f], f))
        else:
            best = min(range(k),
                       key=lambda f: (fold_class[f][target], fold_sizes[f], f))
        assignment[best].append(rec.image_id)
        fold_sizes[best] += 1
        for inst in rec.instances:
            fold_class[best][inst.class_name] += 1
    return [FoldAssignment(fold_index=i, image_ids=tuple(ids))
            for i, ids in enumerate(assignment)]


def fold_balance(records: list[AnnotationRecord],
                 folds: list[FoldAssignment]) -> dict[str, float]:
    """Max per-class deviation (in instances) from a proportional split."""
    by_id = {r.image_id: r for r in records}
    totals = census(records).counts
    k = len(folds)
    worst: dict[str, float] = {}
    for fold in folds:
        cnt: Counter[str] = Counter()
        for image_id in fold.image_ids:
            for inst in by_id[image_id].instances:
                cnt[inst.class_name] += 1
        for cls, total in totals.items():
            dev = abs(cnt[cls] - total / k)
            worst[cls] = max(worst.get(cls, 0.0), dev)
    return worst


def save_folds(folds: list[FoldAssignment], path: str | Path) -> None:
    payload = {str(f.fold_index): list(f.image_ids) for f in folds}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_folds(path: str | Path) -> list[FoldAssignment]:
    payload = json.loads(Path(path).read_text())
    return [FoldAssignment(fold_index=int(idx), image_ids=tuple(ids))
            for idx, ids in sorted(payload.items(), key=lambda kv: int(kv[0]))]


def crop_instance(image: np.ndarray, box: tuple[float, float, float, float],
                  image_size: int, letterbox: bool = True) -> np.ndarray:
    """Cut one box out of an image and square-resize it to image_size.

    The box is clipped to the image first; a box that collapses to zero
    area after clipping is an error. Non-square boxes are zero-padded to
    square before the bilinear resize so aspect ratio is preserved.
    """
    h, w = image.shape[:2]
    x0 = int(np.floor(max(0.0, box[0])))
    y0 = int(np.floor(max(0.0, box[1])))
    x1 = int(np.ceil(min(float(w), box[2])))
    y1 = int(np.ceil(min(float(h), box[3])))
    if x1 <= x0 or y1 <= y0:
        raise ValueError(f"box {box} degenerate after clipping to {w}x{h}")
    crop = image[y0:y1, x0:x1]
    if letterbox:
        crop = letterbox_square(crop)
    return np.clip(resize_bilinear_np(crop, image_size, image_size), 0.0, 1.0)


def extract_crops(records: list[AnnotationRecord], image_size: int = 224,
                  image_root: str | Path | None = None,
                  letterbox: bool = True) -> list[tuple[np.ndarray, str]]:
    """One (crop, class_name) per instance, ordered by (image_id, index)."""
    out: list[tuple[np.ndarray, str]] = []
    for rec in sorted(records, key=lambda r: r.image_id):
        if not rec.instances:
            continue
        path = Path(rec.image_path)
        if image_root is not None and not path.is_absolute():
            path = Path(image_root) / path
        try:
            image = load_image(path)
        except OSError as exc:
            raise OSError(f"cannot read image for {rec.image_id}: {path}") from exc
        for inst in rec.instances:
            out.append((crop_instance(image, inst.box, image_size, letterbox),
                        inst.class_name))
    return out
