"""Detector-stage tests: the wrapped forward pass, the combined loss, the
two-phase schedule, decoding/NMS, and checkpointing."""

import numpy as np
import pytest

from nightsign.autodiff import Tensor
from nightsign.detector import (Detection, TinyGridDetector, TrainSchedule,
                                detect, evaluate_detector,
                                load_detector_checkpoint, nms,
                                save_detector_checkpoint, total_loss,
                                train_backbone_only, train_detector,
                                wrapped_forward)
from nightsign.enhancement import (EnhanceConfig, EnhanceParams, ParamHead,
                                   ParamHeadConfig, invert_scale, noop_raw_scores,
                                   preproc_loss)
from nightsign.synth import generate_detection_set, synth_class_names

RNG = np.random.default_rng(31)
CFG = EnhanceConfig()


def tiny_scene_pairs(n, seed=0, dark=True, size=48):
    samples = generate_detection_set(n, synth_class_names(4), size=size,
                                     seed=seed, dark=dark)
    return [(s.image, s.boxes) for s in samples]


class NoopHead:
    """Raw scores that map exactly to the identity parameters: gamma and
    alpha back-solved through the range map, zeta via tanh saturation."""

    def __init__(self):
        self.config = ParamHeadConfig(downsample_size=16)
        self.scores = np.array([invert_scale(1.0, CFG.gamma_range),
                                invert_scale(1.0, CFG.alpha_range),
                                -40.0])  # tanh(-40) == -1.0 in float64

    def __call__(self, images):
        return Tensor(np.tile(self.scores, (images.shape[0], 1)))


class TestDetectionType:
    def test_confidence_range_enforced(self):
        with pytest.raises(ValueError):
            Detection(box=(0, 0, 1, 1), confidence=1.5)

    def test_malformed_box_rejected(self):
        with pytest.raises(ValueError):
            Detection(box=(5, 0, 1, 1), confidence=0.5)


class TestTinyGridDetector:
    def test_forward_shape(self):
        bb = TinyGridDetector(48, np.random.default_rng(0))
        out = bb.forward(Tensor(RNG.uniform(0, 1, size=(2, 48, 48, 3))))
        assert out.shape == (2, 6, 6, 5)

    def test_loss_finite_and_differentiable(self):
        bb = TinyGridDetector(48, np.random.default_rng(0))
        imgs = RNG.uniform(0, 1, size=(2, 48, 48, 3))
        boxes = [np.array([[8.0, 8.0, 24.0, 24.0]]), np.zeros((0, 4))]
        preds = bb.forward(Tensor(imgs))
        loss = bb.loss(preds, boxes)
        assert np.isfinite(loss.data)
        loss.backward()
        assert all(p.grad is not None for p in bb.parameters())

    def test_decode_recovers_planted_cell(self):
        bb = TinyGridDetector(48, np.random.default_rng(0))
        preds = np.full((1, 6, 6, 5), -9.0)
        preds[0, 2, 3] = [4.0, 0.0, 0.0, np.log(2.0), np.log(2.0)]
        dets = bb.decode(preds, confidence_threshold=0.5)[0]
        assert len(dets) == 1
        d = dets[0]
        # cell (2,3), centered offsets, 2-cell-wide box
        assert d.box == pytest.approx((20.0, 12.0, 36.0, 28.0), abs=1e-9)
        assert d.confidence > 0.97

    def test_nms_suppresses_overlaps(self):
        a = Detection(box=(0, 0, 10, 10), confidence=0.9)
        b = Detection(box=(1, 1, 11, 11), confidence=0.8)
        c = Detection(box=(30, 30, 40, 40), confidence=0.7)
        kept = nms([b, c, a], iou_threshold=0.5)
        assert [k.confidence for k in kept] == [0.9, 0.7]


class TestWrappedForward:
    def test_noop_head_matches_bare_backbone(self):
        bb = TinyGridDetector(48, np.random.default_rng(1))
        imgs = RNG.uniform(0.2, 0.8, size=(2, 48, 48, 3))
        preds, params, enhanced = wrapped_forward(imgs, NoopHead(), bb, CFG)
        bare = bb.forward(Tensor(imgs))
        np.testing.assert_allclose(enhanced.data, imgs, atol=1e-9)
        np.testing.assert_allclose(preds.data, bare.data, atol=1e-7)
        g, a, z = params.values()
        np.testing.assert_allclose(g, 1.0, atol=1e-12)
        np.testing.assert_allclose(a, 1.0, atol=1e-12)
        np.testing.assert_array_equal(z, 0.0)

    def test_batch_param_shapes(self):
        bb = TinyGridDetector(48, np.random.default_rng(1))
        head = ParamHead(ParamHeadConfig(downsample_size=16),
                         np.random.default_rng(2))
        _, params, _ = wrapped_forward(RNG.uniform(0, 1, (2, 48, 48, 3)),
                                       head, bb, CFG)
        assert all(c.shape == (2,) for c in params.astuple())

    def test_head_gradient_nonzero_and_matches_fd(self):
        bb = TinyGridDetector(48, np.random.default_rng(1))
        head = ParamHead(ParamHeadConfig(downsample_size=16),
                         np.random.default_rng(2),
                         output_bias=noop_raw_scores(CFG))
        imgs = RNG.uniform(0.05, 0.5, size=(2, 48, 48, 3))
        boxes = [np.array([[8.0, 8.0, 24.0, 24.0]]),
                 np.array([[16.0, 16.0, 40.0, 40.0]])]

        def objective():
            preds, params, _ = wrapped_forward(imgs, head, bb, CFG)
            return total_loss(bb.loss(preds, boxes), params, CFG)

        loss = objective()
        loss.backward()
        w = head.fc2.bias
        assert w.grad is not None and np.any(w.grad != 0.0)
        eps = 1e-5
        for i in range(3):
            orig = w.data[i]
            w.data[i] = orig + eps
            hi = objective().item()
            w.data[i] = orig - eps
            lo = objective().item()
            w.data[i] = orig
            num = (hi - lo) / (2 * eps)
            assert abs(w.grad[i] - num) / max(abs(num), 1e-8) < 1e-3


class TestTotalLoss:
    def test_default_params_add_nothing(self):
        params = EnhanceParams(1.0, 1.0, 0.0)
        out = total_loss(Tensor(np.asarray(2.5)), params, CFG)
        assert out.item() == 2.5

    def test_hand_case(self):
        params = EnhanceParams(2.0, 1.0, 0.0)
        out = total_loss(Tensor(np.asarray(1.0)), params, CFG)
        assert out.item() == pytest.approx(1.001, abs=1e-12)

    def test_zero_lambdas(self):
        cfg = EnhanceConfig(lambda_gamma=0.0, lambda_alpha=0.0, lambda_zeta=0.0)
        params = EnhanceParams(2.9, 0.4, 1.1)
        assert total_loss(Tensor(np.asarray(3.0)), params, cfg).item() == 3.0

    def test_decomposition_exact(self):
        params = EnhanceParams(np.array([1.3, 0.8]), np.array([2.0, 1.0]),
                               np.array([0.2, 0.9]))
        l_detect = 1.7
        total = total_loss(Tensor(np.asarray(l_detect)), params, CFG).item()
        assert total - l_detect == pytest.approx(preproc_loss(params, CFG), abs=1e-12)


class TestTraining:
    def test_zero_epochs_leave_parameters_untouched(self):
        data = tiny_scene_pairs(4)
        head = ParamHead(ParamHeadConfig(downsample_size=16),
                         np.random.default_rng(0))
        bb = TinyGridDetector(48, np.random.default_rng(1))
        head_state = {k: v.copy() for k, v in head.state_dict().items()}
        bb_state = {k: v.copy() for k, v in bb.state_dict().items()}
        out_head, out_bb, hist = train_detector(
            data, TrainSchedule(head_epochs=0, joint_epochs=0), seed=0,
            head=head, backbone=bb, image_size=48)
        assert hist["loss"] == []
        for k, v in out_head.state_dict().items():
            np.testing.assert_array_equal(v, head_state[k])
        for k, v in out_bb.state_dict().items():
            np.testing.assert_array_equal(v, bb_state[k])

    def test_phase0_keeps_backbone_bitwise_frozen(self):
        data = tiny_scene_pairs(6)
        bb = TinyGridDetector(48, np.random.default_rng(1))
        before = {k: v.copy() for k, v in bb.state_dict().items()}
        _, bb, hist = train_detector(
            data, TrainSchedule(head_epochs=2, joint_epochs=0, batch_size=3),
            seed=0, backbone=bb, image_size=48)
        assert hist["phase"] == [0, 0]
        for k, v in bb.state_dict().items():
            np.testing.assert_array_equal(v, before[k])

    def test_loss_decreases_on_small_set(self):
        data = tiny_scene_pairs(24, seed=3)
        _, _, hist = train_detector(
            data, TrainSchedule(head_epochs=1, joint_epochs=5, head_lr=5e-4,
                                joint_lr=2e-3, batch_size=8),
            seed=0, image_size=48)
        assert hist["loss"][-1] < hist["loss"][0]

    def test_identical_seeds_identical_traces(self):
        data = tiny_scene_pairs(8, seed=4)
        sched = TrainSchedule(head_epochs=1, joint_epochs=2, batch_size=4)
        _, _, h1 = train_detector(data, sched, seed=9, image_size=48)
        _, _, h2 = train_detector(data, sched, seed=9, image_size=48)
        assert h1["loss"] == h2["loss"]

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            train_detector([], TrainSchedule(), seed=0)
        with pytest.raises(ValueError):
            train_backbone_only([], TrainSchedule(), seed=0)


@pytest.fixture(scope="module")
def trained():
    data = tiny_scene_pairs(32, seed=5, dark=False)
    bb, _ = train_backbone_only(
        data, TrainSchedule(head_epochs=0, joint_epochs=8, joint_lr=2e-3,
                            batch_size=8),
        seed=0, image_size=48)
    return bb


class TestDetect:
    def test_threshold_one_gives_nothing(self, trained):
        img = tiny_scene_pairs(1, seed=6, dark=False)[0][0]
        dets, crops = detect(img, None, trained, confidence_threshold=1.0)
        assert dets == [] and crops == []

    def test_blank_image_no_detections(self, trained):
        blank = np.zeros((48, 48, 3))
        dets, _ = detect(blank, None, trained, confidence_threshold=0.5)
        assert dets == []

    def test_crops_align_with_detections(self, trained):
        img = tiny_scene_pairs(1, seed=7, dark=False)[0][0]
        dets, crops = detect(img, None, trained, confidence_threshold=0.2,
                             crop_size=32)
        assert len(dets) == len(crops)
        for crop in crops:
            assert crop.shape == (32, 32, 3)
            assert crop.min() >= 0.0 and crop.max() <= 1.0

    def test_evaluate_detector_structures(self, trained):
        pairs = tiny_scene_pairs(3, seed=8, dark=False)
        dets, gts = evaluate_detector(pairs, None, trained)
        assert set(dets) == set(gts) == {"s00000", "s00001", "s00002"}


class TestCheckpoint:
    def test_roundtrip_preserves_predictions(self, tmp_path):
        head = ParamHead(ParamHeadConfig(downsample_size=16),
                         np.random.default_rng(3))
        bb = TinyGridDetector(48, np.random.default_rng(4))
        img = RNG.uniform(0, 1, size=(48, 48, 3))
        want, _, _ = wrapped_forward(img, head, bb, CFG)
        path = tmp_path / "det.npz"
        save_detector_checkpoint(path, head, bb, CFG)
        head2, bb2, cfg2 = load_detector_checkpoint(path)
        got, _, _ = wrapped_forward(img, head2, bb2, cfg2)
        np.testing.assert_allclose(got.data, want.data, atol=1e-12)
        assert cfg2 == CFG
