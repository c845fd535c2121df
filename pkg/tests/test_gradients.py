"""Central finite differences vs tape gradients for every differentiable op."""

import numpy as np
import pytest

from causalclean import Tensor, ops
from causalclean.gradcheck import check_gradient


def rng(seed):
    return np.random.default_rng(seed)


def proj(shape, seed):
    """Fixed random projection turning an array-valued op into a scalar."""
    r = Tensor(rng(seed).normal(size=shape))
    return lambda t: ops.tsum(ops.mul(t, r))


def assert_grad(name, f, arrays, **kw):
    result = check_gradient(name, f, arrays, **kw)
    assert result.ok, result.line()


class TestElementwiseGrads:
    def test_add_broadcast(self):
        p = proj((3, 4), 0)
        assert_grad("add", lambda a, b: p(ops.add(a, b)),
                    [rng(1).normal(size=(3, 4)), rng(2).normal(size=(4,))])

    def test_sub(self):
        p = proj((3, 4), 1)
        assert_grad("sub", lambda a, b: p(ops.sub(a, b)),
                    [rng(3).normal(size=(3, 4)), rng(4).normal(size=(3, 4))])

    def test_mul_broadcast(self):
        p = proj((2, 3, 4), 2)
        assert_grad("mul", lambda a, b: p(ops.mul(a, b)),
                    [rng(5).normal(size=(2, 3, 4)), rng(6).normal(size=(3, 1))])

    def test_scale(self):
        p = proj((5,), 3)
        assert_grad("scale", lambda a: p(ops.scale(a, -2.5)), [rng(7).normal(size=5)])

    def test_gelu(self):
        p = proj((4, 4), 4)
        assert_grad("gelu", lambda a: p(ops.gelu(a)), [rng(8).normal(size=(4, 4))])

    def test_gate(self):
        p = proj((1, 3, 2), 5)
        assert_grad("gate", lambda a: p(ops.gate(a, axis=1)),
                    [rng(9).normal(size=(1, 6, 2))])

    def test_abs_away_from_zero(self):
        x = rng(10).normal(size=(3, 3))
        x = np.sign(x) * (np.abs(x) + 0.2)
        p = proj((3, 3), 6)
        assert_grad("abs", lambda a: p(ops.absolute(a)), [x])


class TestReductionGrads:
    def test_sum_axis(self):
        p = proj((3,), 7)
        assert_grad("sum", lambda a: p(ops.tsum(a, axis=1)), [rng(11).normal(size=(3, 5))])

    def test_mean_all(self):
        assert_grad("mean", lambda a: ops.tmean(a), [rng(12).normal(size=(4, 4))])


class TestShapeGrads:
    def test_reshape_transpose(self):
        p = proj((4, 6), 8)
        assert_grad("reshape+transpose",
                    lambda a: p(ops.reshape(ops.transpose(a, (1, 0, 2)), (4, 6))),
                    [rng(13).normal(size=(2, 4, 3))])

    def test_concat(self):
        p = proj((5, 3), 9)
        assert_grad("concat", lambda a, b: p(ops.concat([a, b], axis=0)),
                    [rng(14).normal(size=(2, 3)), rng(15).normal(size=(3, 3))])

    def test_narrow(self):
        p = proj((2, 2), 10)
        assert_grad("narrow", lambda a: p(ops.narrow(a, 1, 1, 2)),
                    [rng(16).normal(size=(2, 4))])

    def test_stack(self):
        p = proj((2, 3, 2), 11)
        assert_grad("stack", lambda a, b: p(ops.stack([a, b], axis=0)),
                    [rng(17).normal(size=(3, 2)), rng(18).normal(size=(3, 2))])

    def test_pixel_unshuffle(self):
        p = proj((8, 2, 3), 12)
        assert_grad("pixel_unshuffle", lambda a: p(ops.pixel_unshuffle(a, 2)),
                    [rng(19).normal(size=(2, 4, 6))])

    def test_pixel_shuffle(self):
        p = proj((2, 4, 6), 13)
        assert_grad("pixel_shuffle", lambda a: p(ops.pixel_shuffle(a, 2)),
                    [rng(20).normal(size=(8, 2, 3))])


class TestAttentionGrads:
    def test_matmul(self):
        p = proj((3, 5), 14)
        assert_grad("matmul", lambda a, b: p(ops.matmul(a, b)),
                    [rng(21).normal(size=(3, 4)), rng(22).normal(size=(4, 5))])

    def test_matmul_batched(self):
        p = proj((2, 3, 3), 15)
        assert_grad("matmul_batched", lambda a, b: p(ops.matmul(a, b)),
                    [rng(23).normal(size=(2, 3, 4)), rng(24).normal(size=(4, 3))])

    def test_softmax(self):
        p = proj((4, 6), 16)
        assert_grad("softmax", lambda a: p(ops.softmax(a, axis=1)),
                    [rng(25).normal(size=(4, 6))])

    def test_topk_mask_softmax(self):
        # well-separated scores so eps perturbations cannot cross rank boundaries
        base = np.linspace(-3.0, 3.0, 24)
        scores = rng(26).permutation(base).reshape(4, 6)
        p = proj((4, 6), 17)
        assert_grad("topk+softmax",
                    lambda a: p(ops.softmax(ops.topk_mask(a, k=3, axis=1), axis=1)),
                    [scores])

    def test_l2_normalize(self):
        p = proj((3, 6), 22)
        assert_grad("l2_normalize", lambda a: p(ops.l2_normalize(a, axis=-1)),
                    [rng(31).normal(size=(3, 6))])

    def test_layer_norm(self):
        p = proj((3, 8, 2), 18)
        assert_grad("layer_norm", lambda x, g, b: p(ops.layer_norm(x, g, b, axis=1)),
                    [rng(27).normal(size=(3, 8, 2)),
                     rng(28).normal(size=8),
                     rng(29).normal(size=8)])


class TestConvGrads:
    @pytest.mark.parametrize("stride,groups,padding,mode", [
        (1, 1, 0, "zeros"),
        (1, 1, 1, "zeros"),
        (1, 1, 1, "reflect"),
        (2, 1, 1, "zeros"),
        (1, 2, 0, "zeros"),
    ])
    def test_conv2d(self, stride, groups, padding, mode):
        x = rng(30 + stride).normal(size=(2, 4, 5, 5))
        w = rng(40 + groups).normal(size=(4, 4 // groups, 3, 3)) * 0.5
        b = rng(50).normal(size=4)
        oh = (5 + 2 * padding - 3) // stride + 1
        p = proj((2, 4, oh, oh), 19)
        assert_grad(
            f"conv2d[s{stride},g{groups},{mode}]",
            lambda xx, ww, bb: p(ops.conv2d(xx, ww, bb, stride=stride,
                                            padding=padding, groups=groups,
                                            pad_mode=mode)),
            [x, w, b])

    def test_depthwise(self):
        x = rng(60).normal(size=(1, 4, 5, 5))
        w = rng(61).normal(size=(4, 1, 3, 3))
        p = proj((1, 4, 5, 5), 20)
        assert_grad("conv2d[depthwise]",
                    lambda xx, ww: p(ops.conv2d(xx, ww, padding=1, groups=4)),
                    [x, w])

    def test_pad_reflect(self):
        p = proj((2, 3, 7, 9), 21)
        assert_grad("pad2d[reflect]",
                    lambda a: p(ops.pad2d(a, (1, 2), mode="reflect")),
                    [rng(62).normal(size=(2, 3, 5, 5))])
