"""Dataset machinery walk-through: manifests, census, stratified folds.

Generates a small on-disk synthetic dataset, loads it back, prints the
census, builds a stratified 5-fold split, and reports how balanced the
folds are. Then repeats the census on a benchmark-shaped manifest (6004
images / 14044 instances / 41 long-tailed classes).
"""

import tempfile
from pathlib import Path

from nightsign.dataset import (census, default_class_list, fold_balance,
                               load_manifest, stratified_kfold)
from nightsign.synth import (make_intsd_shaped_manifest, synth_class_names,
                             write_detection_dataset)

with tempfile.TemporaryDirectory() as tmp:
    manifest, _ = write_detection_dataset(Path(tmp) / "demo", 60,
                                          synth_class_names(8), size=64,
                                          seed=4, dark=True)
    records = load_manifest(manifest)
    cen = census(records)
    print(f"synthetic set: {cen.n_images} images, {cen.n_instances} instances, "
          f"{cen.mean_instances_per_image:.2f} signs/image")
    for name, count in sorted(cen.counts.items(), key=lambda kv: -kv[1]):
        print(f"  {name:<20} {count:4d}")

    folds = stratified_kfold(records, 5, seed=0)
    print("\nfold sizes:", [len(f.image_ids) for f in folds])
    worst = fold_balance(records, folds)
    print(f"worst per-class deviation from proportional: "
          f"{max(worst.values()):.2f} instances")

# The bundled 41-class taxonomy with the benchmark's published totals.
records = make_intsd_shaped_manifest(default_class_list(), seed=0)
cen = census(records)
print(f"\nbenchmark-shaped manifest: {cen.n_images} images, "
      f"{cen.n_instances} instances")
print(f"mean signs/image: {cen.mean_instances_per_image:.4f} "
      f"(= {cen.n_instances}/{cen.n_images})")
top = sorted(cen.counts.items(), key=lambda kv: -kv[1])[:5]
print("top-5 classes:", ", ".join(f"{n} ({c})" for n, c in top))
print(f"classes under 100 instances: "
      f"{sum(1 for c in cen.counts.values() if c < 100)} of {len(cen.counts)}")

folds = stratified_kfold(records, 5, seed=0)
print("5-fold image counts:", [len(f.image_ids) for f in folds])
