"""Acceptance suite: one test per criterion, each at its stated tolerance.

The conftest hook prints a `[criterion N] PASS/FAIL` line per test at the
end of the run. Budget-sensitive criteria assert their own wall-clock
limits.
"""

import time

import numpy as np
import pytest

from nightsign import autodiff as ad
from nightsign.augment import class_aug_prob, rarity, AugPolicy
from nightsign.autodiff import Tensor
from nightsign.classifier import (ABLATION_VARIANTS, ClassifierTrainConfig,
                                  FusionConfig, PromptBank,
                                  StubEmbeddingProvider, TriModalClassifier,
                                  class_alpha_weights, embed_crops, focal_loss,
                                  gcnn_forward, normalize_adjacency,
                                  train_classifier)
from nightsign.config import ToolkitConfig
from nightsign.dataset import census, default_class_list, stratified_kfold
from nightsign.detector import (TinyGridDetector, TrainSchedule,
                                evaluate_detector, train_backbone_only,
                                train_detector)
from nightsign.enhancement import (EnhanceConfig, EnhanceParams, enhance,
                                   preproc_loss, scale_params, unsharp)
from nightsign.experiment import run_crossval
from nightsign.metrics import (MAP_50_95_THRESHOLDS, MAP_50_THRESHOLDS,
                               average_precision, brute_force_average_precision,
                               map_at)
from nightsign.nn import MultiheadCrossAttention
from nightsign.synth import (generate_detection_set, make_crop_set,
                             make_intsd_shaped_manifest, make_synthetic_manifest,
                             synth_class_names, write_detection_dataset)
from helpers import random_eval_scenes

CFG = EnhanceConfig()


def central_diff(f, x, eps=1e-4):
    return (f(x + eps) - f(x - eps)) / (2 * eps)


def rel_err(analytic, numeric):
    return abs(analytic - numeric) / max(abs(numeric), 1e-8)


def _sample_unclamped_point(rng, shape=(4, 4, 3), delta=0.05):
    """Image/params combination where no clamp is active: pixels well
    inside [eps, 1], unsharp output inside too, pre-clamp products inside
    (delta, 1-delta)."""
    while True:
        img = rng.uniform(0.15, 0.85, size=shape)
        gamma = rng.uniform(0.6, 1.8)
        alpha = rng.uniform(0.5, 1.4)
        zeta = rng.uniform(0.05, 0.9)
        sharp = unsharp(img, zeta, CFG.sigma_u)
        if sharp.min() <= CFG.epsilon + delta or sharp.max() >= 1 - delta:
            continue
        product = alpha * np.clip(sharp, CFG.epsilon, 1.0) ** gamma
        if product.min() > delta and product.max() < 1 - delta:
            return img, gamma, alpha, zeta


def test_criterion_01_gradient_suite():
    start = time.time()
    rng = np.random.default_rng(100)

    # enhance: analytic vs FD w.r.t. gamma, alpha, zeta, and every pixel
    for _ in range(100):
        img, gamma, alpha, zeta = _sample_unclamped_point(rng)
        proj = rng.normal(size=img.shape)

        def val(g=gamma, a=alpha, z=zeta, im=img):
            return float((enhance(im, EnhanceParams(g, a, z), CFG) * proj).sum())

        tensors = {"gamma": Tensor(np.asarray(gamma), requires_grad=True),
                   "alpha": Tensor(np.asarray(alpha), requires_grad=True),
                   "zeta": Tensor(np.asarray(zeta), requires_grad=True)}
        t_img = Tensor(img, requires_grad=True)
        out = enhance(t_img, EnhanceParams(**tensors), CFG)
        (out * Tensor(proj)).sum().backward()
        assert rel_err(tensors["gamma"].grad,
                       central_diff(lambda v: val(g=v), gamma)) < 1e-3
        assert rel_err(tensors["alpha"].grad,
                       central_diff(lambda v: val(a=v), alpha)) < 1e-3
        assert rel_err(tensors["zeta"].grad,
                       central_diff(lambda v: val(z=v), zeta)) < 1e-3
        flat_grad = t_img.grad.ravel()
        for k in rng.choice(img.size, size=6, replace=False):
            def pixel_val(v, k=k):
                m = img.copy()
                m.ravel()[k] = v
                return val(im=m)

            assert rel_err(flat_grad[k],
                           central_diff(pixel_val, img.ravel()[k])) < 1e-3

    # preproc_loss w.r.t. each parameter
    for _ in range(100):
        vals = np.array([rng.uniform(0.4, 2.8), rng.uniform(0.4, 3.8),
                         rng.uniform(0.05, 1.1)])
        t = Tensor(vals, requires_grad=True)
        preproc_loss(EnhanceParams(t[0], t[1], t[2]), CFG).backward()
        for i in range(3):
            def f(v, i=i):
                m = vals.copy()
                m[i] = v
                return preproc_loss(EnhanceParams(*m), CFG)

            assert rel_err(t.grad[i], central_diff(f, vals[i])) < 1e-3

    # focal loss w.r.t. every logit
    for _ in range(100):
        n = int(rng.integers(3, 10))
        logits = rng.normal(size=n) * 2
        target = int(rng.integers(0, n))
        alpha_w = rng.uniform(0.5, 2.0, size=n)
        t = Tensor(logits, requires_grad=True)
        focal_loss(t, target, alpha_w, 2.0).backward()
        for i in range(n):
            def f(v, i=i):
                m = logits.copy()
                m[i] = v
                return focal_loss(m, target, alpha_w, 2.0).item()

            assert rel_err(t.grad[i], central_diff(f, logits[i])) < 1e-3

    assert time.time() - start < 60.0


def test_criterion_02_parameter_mapping_suite():
    rng = np.random.default_rng(200)
    z = np.concatenate([rng.normal(0, 5, size=(400_000, 3)),
                        rng.uniform(-1e6, 1e6, size=(400_000, 3)),
                        rng.normal(0, 1e3, size=(200_000, 3))])
    assert z.shape[0] == 1_000_000
    params = scale_params(z, CFG)
    for comp, (lo, hi) in zip(params.values(), CFG.ranges):
        assert comp.min() >= lo and comp.max() <= hi
    g, a, zz = scale_params(np.zeros(3), CFG).values()
    assert abs(g - 1.65) < 1e-12
    assert abs(a - 2.15) < 1e-12
    assert abs(zz - 0.60) < 1e-12


def test_criterion_03_noop_identity():
    rng = np.random.default_rng(300)
    for shape in ((16, 16, 3), (7, 11, 3), (2, 8, 8, 3)):
        img = rng.uniform(CFG.epsilon, 1.0, size=shape)
        out = enhance(img, EnhanceParams(1.0, 1.0, 0.0), CFG)
        np.testing.assert_array_equal(out, img)


def test_criterion_04_rarity_fixture():
    r = rarity(22, 4204)
    assert abs(r - 0.62) <= 0.005 + 1e-12
    p = class_aug_prob(0.62, AugPolicy())
    assert abs(p - 0.61) <= 0.005 + 1e-9


def test_criterion_05_loss_reductions():
    rng = np.random.default_rng(500)
    for _ in range(1000):
        n = int(rng.integers(2, 12))
        logits = rng.normal(size=n) * 3
        target = int(rng.integers(0, n))
        got = focal_loss(logits, target, None, 0.0).item()
        shifted = logits - logits.max()
        ce = -(shifted[target] - np.log(np.exp(shifted).sum()))
        assert abs(got - ce) < 1e-6

    counts = {name: int(c) for name, c in zip(
        default_class_list(), rng.integers(1, 5000, size=41))}
    alpha = class_alpha_weights(counts, default_class_list())
    assert abs(alpha.sum() - 41.0) < 1e-9

    loss = focal_loss(np.array([3.3, 3.3]), 0, None, 2.0).item()
    assert abs(loss - 0.25 * np.log(2)) < 1e-9


def test_criterion_06_metrics_oracle():
    rng = np.random.default_rng(600)
    # 100 independent evaluation problems, <= 10 boxes per side
    for case in range(100):
        dets, gts = random_eval_scenes(rng, n_images=int(rng.integers(1, 4)),
                                       max_gt=5, max_extra=4)
        tau = float(rng.choice([0.3, 0.5, 0.75]))
        fast = average_precision(dets, gts, tau)
        slow = brute_force_average_precision(dets, gts, tau)
        assert abs(fast - slow) < 1e-6, f"case {case} at tau {tau}"
    for seed in range(10):
        rng2 = np.random.default_rng(seed)
        dets, gts = random_eval_scenes(rng2, n_images=12)
        assert (map_at(dets, gts, MAP_50_95_THRESHOLDS)
                <= map_at(dets, gts, MAP_50_THRESHOLDS) + 1e-12)


def test_criterion_07_graph_suite():
    a_hat = normalize_adjacency(np.ones((3, 3)))
    assert np.array_equal(a_hat, np.full((3, 3), 1.0) / 3.0)

    rng = np.random.default_rng(700)
    dim = 24
    weights = [(Tensor(rng.normal(size=(dim, dim)) * 0.3),
                Tensor(rng.normal(size=dim))) for _ in range(3)]
    h0 = rng.normal(size=(3, dim))
    perm = np.array([1, 2, 0])
    direct = gcnn_forward(Tensor(h0[perm]), weights, a_hat, 3).data
    permuted = gcnn_forward(Tensor(h0), weights, a_hat, 3).data[perm]
    np.testing.assert_allclose(direct, permuted, atol=1e-6)

    eye_weights = [(Tensor(np.eye(dim)), Tensor(np.zeros(dim)))]
    out = gcnn_forward(Tensor(h0), eye_weights, a_hat, 1).data
    np.testing.assert_allclose(out, np.tile(h0.mean(axis=0), (3, 1)), atol=1e-6)


def test_criterion_08_attention_suite():
    rng = np.random.default_rng(800)
    dim = 32
    attn = MultiheadCrossAttention(dim, 4, np.random.default_rng(1))
    attn(Tensor(rng.normal(size=dim)), Tensor(rng.normal(size=(1, dim))))
    assert np.array_equal(attn.last_weights,
                          np.ones_like(attn.last_weights))

    provider = StubEmbeddingProvider(dim=dim, seed=2)
    bank = PromptBank.build(provider)
    model = TriModalClassifier(
        FusionConfig(dim=dim, n_heads=4, n_classes=5), provider, bank,
        np.random.default_rng(3))
    model.eval()
    v = Tensor(rng.normal(size=dim))
    base1 = model.text_image_fusion(v).data
    order = rng.permutation(bank.matrix.shape[0])
    model.prompt_bank = PromptBank(prompts=tuple(bank.prompts[i] for i in order),
                                   matrix=bank.matrix[order])
    np.testing.assert_allclose(model.text_image_fusion(v).data, base1, atol=1e-6)

    f = Tensor(rng.normal(size=dim))
    nodes = rng.normal(size=(3, dim))
    base2 = model.final_fusion(f, Tensor(nodes)).data
    shuffled = model.final_fusion(f, Tensor(nodes[[2, 0, 1]])).data
    np.testing.assert_allclose(shuffled, base2, atol=1e-6)


def test_criterion_09_toy_end_to_end_classification():
    start = time.time()
    names = synth_class_names(8)
    crops, labels = make_crop_set(200, names, crop_size=48, seed=900)
    idx = np.array([names.index(l) for l in labels])
    provider = StubEmbeddingProvider(dim=64, seed=9, cluster_strength=2.5)
    for crop, i in zip(crops, idx):
        provider.register(crop, int(i))
    bank = PromptBank.build(provider)
    config = FusionConfig(dim=64, n_heads=8, n_classes=8)
    model = TriModalClassifier(config, provider, bank, np.random.default_rng(90))
    embeddings = embed_crops(crops, provider)
    counts = {names[i]: int((idx == i).sum()) for i in range(8)}
    alpha = class_alpha_weights(counts, names)
    history = train_classifier(
        model, embeddings, idx, alpha,
        ClassifierTrainConfig(epochs=50, batch_size=64, learning_rate=2e-3,
                              seed=0))
    assert max(history["accuracy"]) >= 0.95
    assert len(history["accuracy"]) <= 50

    for variant in ABLATION_VARIANTS:
        m = TriModalClassifier(config, provider, bank,
                               np.random.default_rng(91), variant=variant)
        h = train_classifier(m, embeddings, idx, alpha,
                             ClassifierTrainConfig(epochs=2, batch_size=64,
                                                   learning_rate=2e-3, seed=1))
        assert np.isfinite(h["loss"]).all()
    assert time.time() - start < 300.0


def test_criterion_10_enhancement_benefit_directional():
    start = time.time()
    names = synth_class_names(6)
    bright = generate_detection_set(200, names, size=96, seed=7, dark=False)
    train = generate_detection_set(192, names, size=96, seed=10, dark=True)
    test = generate_detection_set(304, names, size=96, seed=99, dark=True)
    assert len(test) >= 300
    bright_pairs = [(s.image, s.boxes) for s in bright]
    train_pairs = [(s.image, s.boxes) for s in train]
    test_pairs = [(s.image, s.boxes) for s in test]

    # shared pretrained initialization (generic bright-scene competence)
    pre = TrainSchedule(head_epochs=0, joint_epochs=8, joint_lr=2e-3,
                        batch_size=16)
    pre_bb, _ = train_backbone_only(bright_pairs, pre, seed=5, image_size=96)
    state = pre_bb.state_dict()

    def pretrained():
        bb = TinyGridDetector(96, np.random.default_rng(0))
        bb.load_state_dict(state)
        return bb

    from nightsign.enhancement import ParamHeadConfig

    sched = TrainSchedule(head_epochs=2, joint_epochs=8, head_lr=1e-3,
                          joint_lr=1e-3, joint_head_lr=3e-4, batch_size=16)
    head, wrapped_bb, _ = train_detector(
        train_pairs, sched, seed=0, backbone=pretrained(), enhance_config=CFG,
        head_config=ParamHeadConfig(downsample_size=48), image_size=96)
    plain_bb, _ = train_backbone_only(train_pairs, sched, seed=0,
                                      backbone=pretrained(), image_size=96)

    d_w, g_w = evaluate_detector(test_pairs, head, wrapped_bb, CFG,
                                 confidence_threshold=0.1)
    d_p, g_p = evaluate_detector(test_pairs, None, plain_bb,
                                 confidence_threshold=0.1)
    map_wrapped = map_at(d_w, g_w, MAP_50_THRESHOLDS)
    map_plain = map_at(d_p, g_p, MAP_50_THRESHOLDS)
    print(f"\nenhancement benefit: wrapped mAP@50 {map_wrapped:.4f} "
          f"vs plain {map_plain:.4f}")
    assert map_wrapped >= map_plain
    assert time.time() - start < 1800.0


def test_criterion_11_data_suite(tmp_path):
    counts = [25, 20, 15, 12, 10, 8, 6, 4]
    names = synth_class_names(8)
    recs = make_synthetic_manifest(100, names, seed=5,
                                   class_weights=[c / 100 for c in counts])
    folds = stratified_kfold(recs, 5, seed=0)
    all_ids = [i for f in folds for i in f.image_ids]
    assert len(all_ids) == 100 and len(set(all_ids)) == 100
    assert set(all_ids) == {r.image_id for r in recs}
    by_id = {r.image_id: r for r in recs}
    totals = census(recs).counts
    for fold in folds:
        fold_counts: dict = {}
        for image_id in fold.image_ids:
            for inst in by_id[image_id].instances:
                fold_counts[inst.class_name] = fold_counts.get(inst.class_name, 0) + 1
        for cls, total in totals.items():
            assert abs(fold_counts.get(cls, 0) - total / 5) <= 1.0

    shaped = make_intsd_shaped_manifest(default_class_list(), seed=0)
    cen = census(shaped)
    assert cen.mean_instances_per_image == cen.n_instances / cen.n_images
    assert (cen.n_images, cen.n_instances) == (6004, 14044)
    # computed ratio sits within rounding distance of the published 2.32
    assert abs(cen.mean_instances_per_image - 2.32) <= 0.02


def test_criterion_12_crossval_determinism(tmp_path):
    write_detection_dataset(tmp_path / "data", 20, synth_class_names(4),
                            size=48, seed=12, dark=True)

    def config(out):
        return ToolkitConfig.from_dict({
            "seed": 4,
            "output_dir": str(tmp_path / out),
            "dataset": {"manifest": str(tmp_path / "data" / "manifest.jsonl"),
                        "class_list": str(tmp_path / "data" / "classes.txt"),
                        "k_folds": 2},
            "detector": {"image_size": 48, "downsample_size": 16,
                         "head_epochs": 1, "joint_epochs": 1, "head_lr": 5e-4,
                         "joint_lr": 2e-3, "batch_size": 8,
                         "pretrain_epochs": 1, "pretrain_images": 10},
            "classifier": {"dim": 32, "n_heads": 4, "crop_size": 32,
                           "epochs": 3, "batch_size": 16,
                           "learning_rate": 3e-3},
            "augment": {"enabled": False},
        })

    rec1 = run_crossval(config("runA"))
    rec2 = run_crossval(config("runB"))
    assert rec1.aggregates == rec2.aggregates
    assert rec1.fold_metrics == rec2.fold_metrics
