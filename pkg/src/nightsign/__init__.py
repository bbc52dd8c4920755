"""nightsign: nighttime traffic-sign recognition toolkit.

A numpy/scipy implementation of a two-stage recognition pipeline: a
learned, differentiable per-image enhancement stage wrapping a pluggable
single-stage detector, and a tri-modal (image embedding / text prompt /
shape-color graph) crop classifier, together with the imbalance-aware
losses, rarity-driven augmentation, dataset split protocol, metrics, and
synthetic-scene machinery needed to exercise and verify the method at
desk scale.
"""

__version__ = "0.1.0"

from . import (augment, autodiff, classifier, dataset, detector, enhancement,
               imageops, metrics, nn, synth)

__all__ = ["augment", "autodiff", "classifier", "dataset", "detector",
           "enhancement", "imageops", "metrics", "nn", "synth", "__version__"]
