"""Detection metrics (IoU, AP, mAP@50, mAP@50:95) and classification
metrics (per-class precision/recall, macro averages, accuracy).

Average precision follows the 101-point interpolated convention with
greedy confidence-descending matching (the convention implied by the
50:95 threshold ladder); a continuous every-point interpolation is
available behind ``interpolation="continuous"``. A deliberately separate
brute-force evaluator — prefix re-matching with scalar loops, no
cumulative shortcuts — exists purely to cross-check the fast path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

Box = tuple[float, float, float, float]
ScoredBox = tuple[Box, float]

MAP_50_THRESHOLDS = (0.50,)
MAP_50_95_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))


def iou(box_a: Box, box_b: Box) -> float:
    """Intersection-over-union of two corner-form boxes."""
    ax0, ay0, ax1, ay1 = box_a
    bx0, by0, bx1, by1 = box_b
    ix0, iy0 = max(ax0, bx0), max(ay0, by0)
    ix1, iy1 = min(ax1, bx1), min(ay1, by1)
    iw, ih = max(0.0, ix1 - ix0), max(0.0, iy1 - iy0)
    inter = iw * ih
    if inter <= 0.0:
        return 0.0
    area_a = (ax1 - ax0) * (ay1 - ay0)
    area_b = (bx1 - bx0) * (by1 - by0)
    return inter / (area_a + area_b - inter)


@dataclass
class MatchResult:
    """Greedy matching of one image's detections against its ground truth."""

    tp_flags: list[bool]
    matched_gt: list[int | None]
    unmatched_gt: int


def match_detections(detections: list[ScoredBox], ground_truths: list[Box],
                     tau: float) -> MatchResult:
    """Match detections (confidence-descending) to ground truths at IoU >= tau.

    Each ground truth is claimed at most once; a detection takes the
    still-unclaimed ground truth of highest IoU.
    """
    order = sorted(range(len(detections)), key=lambda i: (-detections[i][1], i))
    claimed = [False] * len(ground_truths)
    tp = [False] * len(detections)
    matched: list[int | None] = [None] * len(detections)
    for i in order:
        box = detections[i][0]
        best_j, best_iou = None, tau
        for j, gt in enumerate(ground_truths):
            if claimed[j]:
                continue
            v = iou(box, gt)
            if v > best_iou or (v == best_iou and best_j is None and v >= tau):
                best_j, best_iou = j, v
        if best_j is not None:
            claimed[best_j] = True
            tp[i] = True
            matched[i] = best_j
    return MatchResult(tp_flags=tp, matched_gt=matched,
                       unmatched_gt=claimed.count(False))


@dataclass
class APResult:
    value: float
    undefined: bool = False


def _flatten(detections_by_image: dict[str, list[ScoredBox]]):
    flat = []
    for image_id in sorted(detections_by_image):
        for idx, (box, conf) in enumerate(detections_by_image[image_id]):
            flat.append((image_id, idx, box, float(conf)))
    flat.sort(key=lambda r: (-r[3], r[0], r[1]))
    return flat


def average_precision_detailed(detections_by_image: dict[str, list[ScoredBox]],
                               gts_by_image: dict[str, list[Box]],
                               tau: float,
                               interpolation: str = "coco101") -> APResult:
    if interpolation not in ("coco101", "continuous"):
        raise ValueError(f"unknown interpolation '{interpolation}'")
    n_gt = sum(len(v) for v in gts_by_image.values())
    flat = _flatten(detections_by_image)
    if n_gt == 0:
        # no positives to recover: undefined when there are no detections
        return APResult(value=0.0, undefined=not flat)
    if not flat:
        return APResult(value=0.0)

    unclaimed = {img: list(range(len(b))) for img, b in gts_by_image.items()}
    tp = np.zeros(len(flat))
    for k, (image_id, _idx, box, _conf) in enumerate(flat):
        pool = unclaimed.get(image_id, [])
        best_j, best_iou = None, tau
        for j in pool:
            v = iou(box, gts_by_image[image_id][j])
            if v >= tau and (best_j is None or v > best_iou):
                best_j, best_iou = j, v
        if best_j is not None:
            pool.remove(best_j)
            tp[k] = 1.0
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1.0 - tp)
    recall = cum_tp / n_gt
    precision = cum_tp / (cum_tp + cum_fp)
    if interpolation == "coco101":
        envelope = np.maximum.accumulate(precision[::-1])[::-1]
        points = np.linspace(0.0, 1.0, 101)
        idx = np.searchsorted(recall, points, side="left")
        interp = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
        return APResult(value=float(interp.mean()))
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    r = np.concatenate(([0.0], recall))
    return APResult(value=float(np.sum((r[1:] - r[:-1]) * envelope)))


def average_precision(detections_by_image, gts_by_image, tau,
                      interpolation: str = "coco101") -> float:
    return average_precision_detailed(detections_by_image, gts_by_image, tau,
                                      interpolation).value


def brute_force_average_precision(detections_by_image, gts_by_image,
                                  tau: float) -> float:
    """Independent AP path: re-match every confidence prefix from scratch
    and take, for each of the 101 recall points, the best precision among
    operating points reaching that recall. No cumulative-sum shortcuts."""
    n_gt = sum(len(v) for v in gts_by_image.values())
    flat = _flatten(detections_by_image)
    if n_gt == 0 or not flat:
        return 0.0

    def prefix_pr(k: int) -> tuple[float, float]:
        claimed = {img: [False] * len(b) for img, b in gts_by_image.items()}
        tp = 0
        for image_id, _idx, box, _conf in flat[:k]:
            gts = gts_by_image.get(image_id, [])
            best_j, best_v = None, None
            for j, gt in enumerate(gts):
                if claimed[image_id][j]:
                    continue
                v = iou(box, gt)
                if v >= tau and (best_v is None or v > best_v):
                    best_j, best_v = j, v
            if best_j is not None:
                claimed[image_id][best_j] = True
                tp += 1
        return tp / k, tp / n_gt

    operating = [prefix_pr(k) for k in range(1, len(flat) + 1)]
    total = 0.0
    for point in np.linspace(0.0, 1.0, 101):
        best = 0.0
        for prec, rec in operating:
            if rec >= point and prec > best:
                best = prec
        total += best
    return total / 101.0


def map_at(detections_by_image, gts_by_image, thresholds,
           interpolation: str = "coco101") -> float:
    """Mean AP over IoU thresholds (use MAP_50_THRESHOLDS / MAP_50_95_THRESHOLDS)."""
    values = [average_precision(detections_by_image, gts_by_image, t, interpolation)
              for t in thresholds]
    return float(np.mean(values))


# -- classification ------------------------------------------------------------


@dataclass
class ClassMetrics:
    precision: float | None
    recall: float | None
    support: int
    predicted: int


@dataclass
class ClassReport:
    per_class: dict[str, ClassMetrics]
    macro_precision: float
    macro_recall: float
    accuracy: float
    n_samples: int
    excluded_from_precision: int = 0
    excluded_from_recall: int = 0

    def format_table(self) -> str:
        width = max(len("class"), *(len(c) for c in self.per_class))
        lines = [f"{'class':<{width}}  precision%  recall%  support"]
        for name, m in self.per_class.items():
            p = f"{100 * m.precision:9.2f}" if m.precision is not None else "        -"
            r = f"{100 * m.recall:6.2f}" if m.recall is not None else "     -"
            lines.append(f"{name:<{width}}  {p}   {r}  {m.support:7d}")
        lines.append(f"{'macro':<{width}}  {100 * self.macro_precision:9.2f}"
                     f"   {100 * self.macro_recall:6.2f}  {self.n_samples:7d}")
        lines.append(f"accuracy {100 * self.accuracy:.2f}%")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "per_class": {
                name: {"precision": m.precision, "recall": m.recall,
                       "support": m.support, "predicted": m.predicted}
                for name, m in self.per_class.items()},
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "accuracy": self.accuracy,
            "n_samples": self.n_samples,
            "excluded_from_precision": self.excluded_from_precision,
            "excluded_from_recall": self.excluded_from_recall,
        }


def classification_report(predictions: list, targets: list,
                          class_list: list[str],
                          strict_zero: bool = False) -> ClassReport:
    """Per-class precision/recall/support plus macro means and accuracy.

    Classes with no predictions (resp. no support) have undefined
    precision (resp. recall) and are excluded from the macro mean unless
    `strict_zero`, which scores them as 0 and includes them.
    """
    if len(predictions) != len(targets):
        raise ValueError("predictions and targets differ in length")
    if not predictions:
        raise ValueError("empty input")
    per_class: dict[str, ClassMetrics] = {}
    correct = 0
    for name in class_list:
        support = sum(1 for t in targets if t == name)
        predicted = sum(1 for p in predictions if p == name)
        tp = sum(1 for p, t in zip(predictions, targets) if p == t == name)
        precision = tp / predicted if predicted else None
        recall = tp / support if support else None
        per_class[name] = ClassMetrics(precision, recall, support, predicted)
    correct = sum(1 for p, t in zip(predictions, targets) if p == t)

    def macro(values: list[float | None]) -> tuple[float, int]:
        if strict_zero:
            filled = [0.0 if v is None else v for v in values]
            return float(np.mean(filled)), 0
        defined = [v for v in values if v is not None]
        excluded = len(values) - len(defined)
        return (float(np.mean(defined)) if defined else 0.0), excluded

    macro_p, excl_p = macro([m.precision for m in per_class.values()])
    macro_r, excl_r = macro([m.recall for m in per_class.values()])
    return ClassReport(per_class=per_class, macro_precision=macro_p,
                       macro_recall=macro_r,
                       accuracy=correct / len(predictions),
                       n_samples=len(predictions),
                       excluded_from_precision=excl_p,
                       excluded_from_recall=excl_r)
