"""Rarity-driven augmentation walk-through.

Shows the rarity score as a function of class count, the per-class
augmentation probabilities it induces, and a grid of augmented versions
of one crop under different seeds.
"""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from nightsign.augment import (AugPolicy, RarityTable, apply_augmentations,
                               class_aug_prob, family_probabilities, rarity)
from nightsign.dataset import census, default_class_list
from nightsign.synth import make_crop_set, make_intsd_shaped_manifest, synth_class_names

OUT = Path(__file__).parent / "output"
OUT.mkdir(exist_ok=True)

policy = AugPolicy()

# Rarity is a logarithmic under-representation score: 1 for an unseen
# class, 0 for the most common one.
counts = np.unique(np.round(np.logspace(0, np.log10(4204), 60)).astype(int))
scores = [rarity(int(c), 4204) for c in counts]
probs = [class_aug_prob(r, policy) for r in scores]

fig, ax = plt.subplots(figsize=(6, 4))
ax.semilogx(counts, scores, label="rarity r(c)")
ax.semilogx(counts, probs, label="p_class")
ax.axhline(0.15, color="gray", lw=0.8, ls="--")
ax.set_xlabel("class instance count (count_max = 4204)")
ax.legend()
ax.grid(alpha=0.3)
fig.tight_layout()
fig.savefig(OUT / "rarity_schedule.png", dpi=110)
print(f"wrote {OUT / 'rarity_schedule.png'}")

# Per-class probabilities over the benchmark-shaped census, then the
# per-family applied probabilities for one rare and one common class.
cen = census(make_intsd_shaped_manifest(default_class_list(), seed=0))
table = RarityTable.from_census(cen, policy)
rare = min(cen.counts, key=cen.counts.get)
common = max(cen.counts, key=cen.counts.get)
for cls in (rare, common):
    fams = family_probabilities(policy, table.p_class[cls])
    fam_text = ", ".join(f"{k}={v:.2f}" for k, v in fams.items())
    print(f"{cls} (count {cen.counts[cls]}): p_class={table.p_class[cls]:.2f}; "
          f"applied: {fam_text}")

# Visual: the same crop under eight augmentation seeds. A small census
# over the synthetic classes marks this one as rare, so most families fire.
crops, labels = make_crop_set(1, synth_class_names(4), crop_size=96, seed=2)
crop = crops[0]
from nightsign.dataset import ClassCensus

toy_census = ClassCensus(counts={labels[0]: 4, "rectangle_blue": 400},
                         n_images=404, n_instances=404)
toy_table = RarityTable.from_census(toy_census, policy)
fig, axes = plt.subplots(1, 9, figsize=(18, 2.4))
axes[0].imshow(crop)
axes[0].set_title("original")
for k, ax in enumerate(axes[1:]):
    ax.imshow(apply_augmentations(crop, labels[0], policy, toy_table, rng_seed=k))
    ax.set_title(f"seed {k}")
for ax in axes:
    ax.axis("off")
fig.tight_layout()
fig.savefig(OUT / "augmented_grid.png", dpi=110)
print(f"wrote {OUT / 'augmented_grid.png'}")
