"""Finite-difference verification of every autodiff op.

Each check builds a scalar objective from the op under test, computes
analytic gradients with one backward sweep, and compares against central
differences. Tolerances are loose enough for float64 FD noise only.
"""

import numpy as np
import pytest

from nightsign import autodiff as ad
from nightsign.autodiff import Tensor
from nightsign import nn


def numerical_grads(f, arrays, eps=1e-6):
    grads = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            orig = a[idx]
            a[idx] = orig + eps
            hi = f(arrays)
            a[idx] = orig - eps
            lo = f(arrays)
            a[idx] = orig
            g[idx] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


def check_grads(build, arrays, atol=1e-7, rtol=1e-5):
    """build(list_of_tensors) -> scalar Tensor; arrays are the leaf values."""

    def f(arrs):
        return build([Tensor(a) for a in arrs]).item()

    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = build(tensors)
    out.backward()
    numeric = numerical_grads(f, arrays)
    for t, num in zip(tensors, numeric):
        assert t.grad is not None
        np.testing.assert_allclose(t.grad, num, atol=atol, rtol=rtol)


RNG = np.random.default_rng(7)


class TestArithmetic:
    def test_add_broadcast(self):
        check_grads(lambda ts: (ts[0] + ts[1]).sum(),
                    [RNG.normal(size=(3, 4)), RNG.normal(size=(4,))])

    def test_sub_rsub(self):
        check_grads(lambda ts: (2.0 - ts[0]).sum() + (ts[0] - 1.0).sum(),
                    [RNG.normal(size=(5,))])

    def test_mul_div(self):
        check_grads(lambda ts: ((ts[0] * ts[1]) / (ts[1] * ts[1] + 2.0)).sum(),
                    [RNG.normal(size=(2, 3)), RNG.normal(size=(2, 3))])

    def test_pow_scalar(self):
        check_grads(lambda ts: (ts[0] ** 3.0).sum(),
                    [RNG.uniform(0.5, 2.0, size=(4,))])

    def test_pow_tensor_exponent(self):
        base = RNG.uniform(0.2, 0.9, size=(3, 3))
        expo = RNG.uniform(0.5, 2.5, size=())
        check_grads(lambda ts: (ts[0] ** ts[1]).sum(), [base, expo])

    def test_matmul(self):
        check_grads(lambda ts: (ts[0] @ ts[1]).sum(),
                    [RNG.normal(size=(3, 4)), RNG.normal(size=(4, 2))])

    def test_matmul_batched_broadcast(self):
        # (B,h,1,dh) @ (h,dh,P): the cross-attention shape
        check_grads(lambda ts: (ts[0] @ ts[1]).sum(),
                    [RNG.normal(size=(2, 3, 1, 4)), RNG.normal(size=(3, 4, 5))])


class TestElementwise:
    @pytest.mark.parametrize("name", ["exp", "log", "sqrt", "tanh", "sigmoid", "gelu"])
    def test_unary(self, name):
        base = RNG.uniform(0.3, 1.5, size=(3, 4))
        check_grads(lambda ts: getattr(ts[0], name)().sum(), [base])

    def test_relu_interior(self):
        base = RNG.normal(size=(20,))
        base[np.abs(base) < 1e-2] = 0.5  # keep away from the kink
        check_grads(lambda ts: ts[0].relu().sum(), [base])

    def test_clip_interior(self):
        base = RNG.uniform(0.2, 0.8, size=(10,))
        check_grads(lambda ts: ts[0].clip(0.0, 1.0).sum(), [base])

    def test_clip_blocks_gradient_outside(self):
        t = Tensor(np.array([-1.0, 0.5, 2.0]), requires_grad=True)
        t.clip(0.0, 1.0).sum().backward()
        np.testing.assert_array_equal(t.grad, [0.0, 1.0, 0.0])


class TestReductionsAndShape:
    def test_sum_axis_keepdims(self):
        check_grads(lambda ts: (ts[0].sum(axis=1, keepdims=True) * ts[0]).sum(),
                    [RNG.normal(size=(3, 4))])

    def test_mean_axes(self):
        check_grads(lambda ts: (ts[0].mean(axis=(0, 2)) ** 2.0).sum(),
                    [RNG.normal(size=(2, 3, 4))])

    def test_reshape_transpose(self):
        check_grads(
            lambda ts: (ts[0].reshape(4, 6).transpose((1, 0)) ** 2.0).sum(),
            [RNG.normal(size=(2, 3, 4))])

    def test_getitem_slice(self):
        check_grads(lambda ts: (ts[0][1:, ::2] ** 2.0).sum(),
                    [RNG.normal(size=(4, 6))])

    def test_getitem_fancy(self):
        idx = (np.array([0, 1, 2]), np.array([1, 1, 0]))
        check_grads(lambda ts: (ts[0][idx] ** 2.0).sum(),
                    [RNG.normal(size=(3, 2))])

    def test_concat_stack(self):
        check_grads(
            lambda ts: (ad.concatenate([ts[0], ts[1]], axis=1) ** 2.0).sum()
            + (ad.stack([ts[0], ts[1]], axis=0) * 3.0).sum(),
            [RNG.normal(size=(2, 3)), RNG.normal(size=(2, 3))])


class TestSoftmax:
    def test_softmax_grad(self):
        w = RNG.normal(size=(2, 5))
        check_grads(lambda ts: (ad.softmax(ts[0], axis=-1) * Tensor(w)).sum(),
                    [RNG.normal(size=(2, 5))])

    def test_log_softmax_matches_log_of_softmax(self):
        x = Tensor(RNG.normal(size=(3, 7)))
        np.testing.assert_allclose(ad.log_softmax(x).data,
                                   np.log(ad.softmax(x).data), atol=1e-12)

    def test_softmax_rows_sum_to_one(self):
        x = Tensor(RNG.normal(size=(4, 9)) * 50)
        np.testing.assert_allclose(ad.softmax(x).data.sum(axis=-1), 1.0, atol=1e-12)


class TestStructuredOps:
    def test_take_axis(self):
        idx = np.array([0, 2, 2, 1])
        check_grads(lambda ts: (ad.take_axis(ts[0], idx, axis=1) ** 2.0).sum(),
                    [RNG.normal(size=(2, 3, 2))])

    def test_reflect_pad_values(self):
        x = Tensor(np.arange(4.0))
        padded = ad.reflect_pad(x, 2, axis=0)
        np.testing.assert_array_equal(padded.data, [2, 1, 0, 1, 2, 3, 2, 1])

    def test_reflect_pad_grad(self):
        check_grads(lambda ts: (ad.reflect_pad(ts[0], 2, axis=0) ** 2.0).sum(),
                    [RNG.normal(size=(5, 2))])

    def test_correlate1d_matches_numpy(self):
        x = RNG.normal(size=(10,))
        k = np.array([0.25, 0.5, 0.25])
        out = ad.correlate1d(Tensor(x), k, axis=0)
        np.testing.assert_allclose(out.data, np.correlate(x, k, mode="valid"),
                                   atol=1e-12)

    def test_correlate1d_grad(self):
        k = RNG.normal(size=5)
        check_grads(lambda ts: (ad.correlate1d(ts[0], k, axis=1) ** 2.0).sum(),
                    [RNG.normal(size=(2, 9))])

    def test_resize_bilinear_constant_preserved(self):
        x = Tensor(np.full((8, 8, 3), 0.37))
        out = ad.resize_bilinear(x, (3, 5), axes=(0, 1))
        assert out.shape == (3, 5, 3)
        np.testing.assert_allclose(out.data, 0.37, atol=1e-12)

    def test_resize_bilinear_grad(self):
        check_grads(
            lambda ts: (ad.resize_bilinear(ts[0], (2, 3), axes=(0, 1)) ** 2.0).sum(),
            [RNG.normal(size=(5, 7, 2))])

    def test_conv2d_forward_oracle(self):
        # brute-force direct convolution comparison
        x = RNG.normal(size=(1, 6, 7, 2))
        w = RNG.normal(size=(3, 3, 2, 4))
        out = ad.conv2d(Tensor(x), Tensor(w), stride=2, padding=1)
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        ho, wo = out.shape[1], out.shape[2]
        ref = np.zeros((1, ho, wo, 4))
        for i in range(ho):
            for j in range(wo):
                patch = xp[0, 2 * i:2 * i + 3, 2 * j:2 * j + 3, :]
                for f in range(4):
                    ref[0, i, j, f] = np.sum(patch * w[:, :, :, f])
        np.testing.assert_allclose(out.data, ref, atol=1e-10)

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
    def test_conv2d_grad(self, stride, padding):
        check_grads(
            lambda ts: (ad.conv2d(ts[0], ts[1], ts[2],
                                  stride=stride, padding=padding) ** 2.0).sum(),
            [RNG.normal(size=(2, 5, 6, 2)),
             RNG.normal(size=(3, 3, 2, 3)),
             RNG.normal(size=(3,))])


class TestLayers:
    def test_linear_grad(self):
        rng = np.random.default_rng(0)
        layer = nn.Linear(4, 3, rng)
        x = Tensor(RNG.normal(size=(5, 4)), requires_grad=True)
        out = (layer(x) ** 2.0).sum()
        out.backward()

        def f(arrs):
            lw, lb, xv = arrs
            return float((((xv @ lw) + lb) ** 2).sum())

        arrays = [layer.weight.data, layer.bias.data, x.data]
        num = numerical_grads(f, arrays)
        np.testing.assert_allclose(layer.weight.grad, num[0], atol=1e-6, rtol=1e-5)
        np.testing.assert_allclose(layer.bias.grad, num[1], atol=1e-6, rtol=1e-5)
        np.testing.assert_allclose(x.grad, num[2], atol=1e-6, rtol=1e-5)

    def test_layernorm_normalizes(self):
        ln = nn.LayerNorm(16)
        x = Tensor(RNG.normal(size=(3, 16)) * 5 + 2)
        out = ln(x).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-9)
        np.testing.assert_allclose(out.std(axis=-1), 1.0, atol=1e-3)

    def test_layernorm_grad(self):
        ln = nn.LayerNorm(6)
        x = RNG.normal(size=(2, 6))

        def build(ts):
            ln.gain, ln.shift = ts[1], ts[2]
            return (ln(ts[0]) ** 2.0).sum()

        check_grads(build, [x, np.ones(6), np.zeros(6)], atol=1e-6)

    def test_attention_shapes_and_grad(self):
        rng = np.random.default_rng(3)
        attn = nn.MultiheadCrossAttention(8, 2, rng)
        q = Tensor(RNG.normal(size=(3, 8)), requires_grad=True)
        kv = Tensor(RNG.normal(size=(5, 8)), requires_grad=True)
        out = attn(q, kv)
        assert out.shape == (3, 8)
        (out ** 2.0).sum().backward()
        assert q.grad is not None and kv.grad is not None
        assert attn.last_weights.shape == (3, 2, 1, 5)
        np.testing.assert_allclose(attn.last_weights.sum(axis=-1), 1.0, atol=1e-12)

    def test_attention_batched_kv(self):
        rng = np.random.default_rng(3)
        attn = nn.MultiheadCrossAttention(8, 4, rng)
        out = attn(Tensor(RNG.normal(size=(2, 8))),
                   Tensor(RNG.normal(size=(2, 3, 8))))
        assert out.shape == (2, 8)

    def test_dropout_eval_identity_and_train_scale(self):
        x = Tensor(np.ones((1000,)))
        assert ad.dropout(x, 0.5, None, training=False) is x
        rng = np.random.default_rng(0)
        out = ad.dropout(x, 0.5, rng, training=True)
        kept = out.data[out.data > 0]
        np.testing.assert_allclose(kept, 2.0)
        assert 400 < kept.size < 600


class TestOptimizers:
    def test_adam_minimizes_quadratic(self):
        p = nn.parameter(np.array([5.0, -3.0]))
        opt = nn.Adam([p], lr=0.1)
        for _ in range(200):
            opt.zero_grad()
            loss = (p * p).sum()
            loss.backward()
            opt.step()
        assert np.all(np.abs(p.data) < 1e-2)

    def test_sgd_step_direction(self):
        p = nn.parameter(np.array([1.0]))
        opt = nn.SGD([p], lr=0.5)
        (p * p).sum().backward()
        opt.step()
        np.testing.assert_allclose(p.data, [0.0], atol=1e-12)


def test_no_grad_blocks_graph():
    with ad.no_grad():
        t = Tensor(np.ones(3), requires_grad=True)
        out = (t * 2.0).sum()
    assert not out.requires_grad
