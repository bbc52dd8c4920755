"""Shared test fixtures: random detection/ground-truth scene sets."""

import numpy as np


def random_box(rng, lo=0.0, hi=100.0, min_side=2.0):
    x0 = rng.uniform(lo, hi - min_side)
    y0 = rng.uniform(lo, hi - min_side)
    w = rng.uniform(min_side, (hi - x0))
    h = rng.uniform(min_side, (hi - y0))
    return (x0, y0, x0 + w, y0 + h)


def random_eval_scenes(rng, n_images, max_gt=6, max_extra=4):
    """Detections = jittered copies of some ground truths plus spurious
    boxes, all with random confidences. Returns (dets_by_image, gts_by_image)."""
    dets, gts = {}, {}
    for i in range(n_images):
        image_id = f"img{i:04d}"
        n_gt = int(rng.integers(0, max_gt + 1))
        gt_boxes = [random_box(rng) for _ in range(n_gt)]
        det_boxes = []
        for box in gt_boxes:
            if rng.random() < 0.75:  # most ground truths get a candidate
                jitter = rng.normal(0, 3.0, size=4)
                x0, y0, x1, y1 = np.array(box) + jitter
                if x1 - x0 > 1 and y1 - y0 > 1:
                    det_boxes.append(((x0, y0, x1, y1), float(rng.random())))
        for _ in range(int(rng.integers(0, max_extra + 1))):
            det_boxes.append((random_box(rng), float(rng.random())))
        dets[image_id] = det_boxes
        gts[image_id] = gt_boxes
    return dets, gts
