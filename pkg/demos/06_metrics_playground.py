"""Metrics walk-through: IoU, AP against the brute-force oracle, the
mAP threshold ladder, and the classification report."""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from nightsign.metrics import (MAP_50_95_THRESHOLDS, MAP_50_THRESHOLDS,
                               average_precision, brute_force_average_precision,
                               classification_report, iou, map_at)

OUT = Path(__file__).parent / "output"
OUT.mkdir(exist_ok=True)

rng = np.random.default_rng(0)

print("IoU of (0,0,2,2) and (1,0,3,2):", iou((0, 0, 2, 2), (1, 0, 3, 2)))

# Random scene set: jittered true boxes plus spurious ones.
gts, dets = {}, {}
for i in range(25):
    image_id = f"img{i}"
    boxes = []
    for _ in range(rng.integers(1, 5)):
        x0, y0 = rng.uniform(0, 70, 2)
        w, h = rng.uniform(8, 25, 2)
        boxes.append((x0, y0, x0 + w, y0 + h))
    gts[image_id] = boxes
    scored = []
    for b in boxes:
        if rng.random() < 0.8:
            jit = rng.normal(0, 2.5, 4)
            scored.append(((b[0] + jit[0], b[1] + jit[1],
                            b[2] + jit[2], b[3] + jit[3]), rng.random()))
    for _ in range(rng.integers(0, 3)):
        x0, y0 = rng.uniform(0, 70, 2)
        scored.append(((x0, y0, x0 + 15, y0 + 15), rng.random()))
    dets[image_id] = scored

taus = np.round(np.linspace(0.3, 0.9, 13), 3)
fast = [average_precision(dets, gts, t) for t in taus]
slow = [brute_force_average_precision(dets, gts, t) for t in taus]
print("max |fast - brute force| over thresholds:",
      max(abs(a - b) for a, b in zip(fast, slow)))
print(f"mAP@50    {map_at(dets, gts, MAP_50_THRESHOLDS):.4f}")
print(f"mAP@50:95 {map_at(dets, gts, MAP_50_95_THRESHOLDS):.4f}")

fig, ax = plt.subplots(figsize=(6, 4))
ax.plot(taus, fast, "o-", label="evaluator")
ax.plot(taus, slow, "x--", label="brute-force oracle")
ax.set_xlabel("IoU threshold")
ax.set_ylabel("average precision")
ax.legend()
ax.grid(alpha=0.3)
fig.tight_layout()
fig.savefig(OUT / "ap_vs_threshold.png", dpi=110)
print(f"wrote {OUT / 'ap_vs_threshold.png'}")

# Classification report on a synthetic confusion pattern.
classes = ["stop", "speed", "warning", "ghost"]
targets = ["stop"] * 30 + ["speed"] * 50 + ["warning"] * 20
preds = (["stop"] * 27 + ["speed"] * 3
         + ["speed"] * 44 + ["warning"] * 6
         + ["warning"] * 15 + ["stop"] * 5)
report = classification_report(preds, targets, classes)
print()
print(report.format_table())
print(f"(classes with no predictions excluded from macro precision: "
      f"{report.excluded_from_precision})")
