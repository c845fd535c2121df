import numpy as np
import pytest

from causalclean import NEG_INF, NumericalError, ShapeError, Tape, Tensor
from causalclean import full, ops, set_checked, uniform, zeros


def naive_matmul(a, b):
    """Triple-loop oracle, independent of the ops implementation."""
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m), dtype=np.float64)
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for p in range(k):
                acc += a[i, p] * b[p, j]
            out[i, j] = acc
    return out


def naive_conv2d(x, w, b, stride, groups):
    """Six-loop cross-correlation oracle (valid padding)."""
    n, ci, h, wd = x.shape
    co, cig, kh, kw = w.shape
    oh = (h - kh) // stride + 1
    ow = (wd - kw) // stride + 1
    cog = co // groups
    out = np.zeros((n, co, oh, ow), dtype=np.float64)
    for ni in range(n):
        for o in range(co):
            g = o // cog
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0 if b is None else float(b[o])
                    for c in range(cig):
                        for u in range(kh):
                            for v in range(kw):
                                acc += (x[ni, g * cig + c, i * stride + u, j * stride + v]
                                        * w[o, c, u, v])
                    out[ni, o, i, j] = acc
    return out


class TestCreate:
    def test_zeros(self):
        assert np.array_equal(zeros([2, 2]).data, [[0, 0], [0, 0]])

    def test_constant(self):
        assert np.array_equal(full([3], 1).data, [1, 1, 1])

    def test_uniform_deterministic(self):
        a = uniform([4], seed=7)
        b = uniform([4], seed=7)
        assert np.array_equal(a.data, b.data)
        assert not np.array_equal(a.data, uniform([4], seed=8).data)

    @pytest.mark.parametrize("shape", [[0], [2, -1], [3, 0, 4]])
    def test_bad_extents(self, shape):
        with pytest.raises(ShapeError):
            zeros(shape)

    def test_checked_mode_rejects_nan(self):
        prev = set_checked(True)
        try:
            with pytest.raises(NumericalError):
                Tensor(np.array([1.0, np.nan]))
        finally:
            set_checked(prev)


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        eye = Tensor(np.eye(2))
        assert np.array_equal(ops.matmul(a, eye).data, a.data)

    def test_mixed_precision_rejected(self):
        with pytest.raises(ShapeError):
            ops.matmul(zeros([2, 2], dtype=np.float64), zeros([2, 2], dtype=np.float32))

    def test_ones_sum(self):
        out = ops.matmul(Tensor(np.ones((1, 2))), Tensor(np.ones((2, 1))))
        assert np.array_equal(out.data, [[2.0]])

    def test_against_naive_loop(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        out = ops.matmul(Tensor(a), Tensor(b)).data
        assert np.max(np.abs(out - naive_matmul(a, b))) < 1e-12

    def test_batched_broadcast(self):
        rng = np.random.default_rng(5)
        a = rng.normal(size=(3, 2, 4))
        b = rng.normal(size=(4, 5))
        out = ops.matmul(Tensor(a), Tensor(b)).data
        for t in range(3):
            assert np.allclose(out[t], a[t] @ b)

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestSoftmax:
    def test_symmetry(self):
        out = ops.softmax(Tensor([0.0, 0.0]), axis=0)
        assert np.allclose(out.data, [0.5, 0.5])

    def test_shift_invariance_no_overflow(self):
        x = np.array([3.0, 1003.0])
        big = ops.softmax(Tensor(x), axis=0).data
        small = ops.softmax(Tensor(x - 1000.0), axis=0).data
        assert np.all(np.isfinite(big))
        assert np.array_equal(big, small)
        assert big[1] > 1.0 - 1e-12

    def test_rows_sum_to_one(self):
        x = uniform([5, 7], seed=11, low=-3, high=3)
        out = ops.softmax(x, axis=1)
        assert np.allclose(out.data.sum(axis=1), 1.0, atol=1e-6)
        assert np.all(out.data > 0.0)


class TestTopkMask:
    def test_full_k_is_identity(self):
        x = uniform([4, 6], seed=2, low=-1, high=1)
        out = ops.topk_mask(x, k=6, axis=1)
        assert np.array_equal(out.data, x.data)

    def test_argmax_case(self):
        out = ops.topk_mask(Tensor(np.array([3.0, 1.0, 2.0])), k=1, axis=0)
        sentinel = NEG_INF[np.dtype(np.float64)]
        assert np.array_equal(out.data, [3.0, sentinel, sentinel])

    def test_tie_breaks_to_lowest_index(self):
        out = ops.topk_mask(Tensor(np.array([5.0, 5.0, 1.0])), k=1, axis=0)
        sentinel = NEG_INF[np.dtype(np.float64)]
        assert np.array_equal(out.data, [5.0, sentinel, sentinel])

    @pytest.mark.parametrize("k", [0, 7, -1])
    def test_k_out_of_range(self, k):
        with pytest.raises(ShapeError):
            ops.topk_mask(zeros([2, 6]), k=k, axis=1)

    def test_exactly_k_survivors_per_row(self):
        x = uniform([5, 9], seed=4, low=-2, high=2)
        out = ops.topk_mask(x, k=3, axis=1)
        survivors = out.data != NEG_INF[x.dtype]
        assert np.all(survivors.sum(axis=1) == 3)
        # surviving rows keep the unmasked argmax
        assert np.array_equal(np.argmax(out.data, axis=1), np.argmax(x.data, axis=1))

    def test_gradient_only_through_survivors(self):
        x = Tensor(np.array([[3.0, 1.0, 2.0]]), watched=True)
        with Tape() as tape:
            loss = ops.tsum(ops.topk_mask(x, k=2, axis=1))
            grads = tape.backward(loss)
        assert np.array_equal(grads[x], [[1.0, 0.0, 1.0]])

    def test_softmax_of_full_topk_equals_plain_softmax(self):
        x = uniform([3, 8], seed=9, low=-4, high=4)
        masked = ops.softmax(ops.topk_mask(x, k=8, axis=1), axis=1)
        plain = ops.softmax(x, axis=1)
        assert np.array_equal(masked.data, plain.data)


class TestConv2d:
    def test_one_by_one_identity(self):
        x = uniform([1, 1, 5, 5], seed=1)
        w = Tensor(np.ones((1, 1, 1, 1), dtype=np.float32))
        out = ops.conv2d(x, w)
        assert np.array_equal(out.data, x.data)

    def test_constant_input_reflect_padding(self):
        x = full([1, 1, 6, 6], 0.5, dtype=np.float64)
        w = uniform([1, 1, 3, 3], seed=3, dtype=np.float64)
        out = ops.conv2d(x, w, padding=1, pad_mode="reflect")
        expected = 0.5 * w.data.sum()
        assert out.shape == (1, 1, 6, 6)
        assert np.allclose(out.data, expected, atol=1e-12)

    @pytest.mark.parametrize("stride,groups,bias", [(1, 1, True), (2, 1, False), (1, 2, True)])
    def test_against_naive_loop(self, stride, groups, bias):
        rng = np.random.default_rng(17)
        x = rng.normal(size=(2, 4, 7, 6))
        w = rng.normal(size=(6, 4 // groups, 3, 3))
        b = rng.normal(size=6) if bias else None
        out = ops.conv2d(Tensor(x), Tensor(w), None if b is None else Tensor(b),
                         stride=stride, groups=groups)
        oracle = naive_conv2d(x, w, b, stride, groups)
        assert np.max(np.abs(out.data - oracle)) < 1e-10

    def test_depthwise_matches_naive(self):
        rng = np.random.default_rng(23)
        x = rng.normal(size=(1, 4, 6, 6))
        w = rng.normal(size=(4, 1, 3, 3))
        out = ops.conv2d(Tensor(x), Tensor(w), groups=4)
        assert np.max(np.abs(out.data - naive_conv2d(x, w, None, 1, 4))) < 1e-10

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            ops.conv2d(zeros([1, 3, 4, 4]), zeros([2, 2, 3, 3]))  # cig mismatch
        with pytest.raises(ShapeError):
            ops.conv2d(zeros([1, 3, 2, 2]), zeros([2, 3, 3, 3]))  # kernel too big


class TestShapeOps:
    def test_concat_history_shape(self):
        h = zeros([3, 2, 4, 4])
        f = zeros([1, 2, 4, 4])
        assert ops.concat([h, f], axis=0).shape == (4, 2, 4, 4)

    def test_pixel_unshuffle_shuffle_roundtrip(self):
        x = uniform([3, 8, 6], seed=6)
        down = ops.pixel_unshuffle(x, 2)
        assert down.shape == (12, 4, 3)
        back = ops.pixel_shuffle(down, 2)
        assert np.array_equal(back.data, x.data)

    def test_transpose_reshape(self):
        x = uniform([2, 3, 4], seed=8)
        t = ops.transpose(x, (2, 0, 1))
        assert t.shape == (4, 2, 3)
        assert np.array_equal(ops.reshape(t, (24,)).data, x.data.transpose(2, 0, 1).reshape(-1))

    def test_gate_splits_and_multiplies(self):
        x = Tensor(np.arange(8, dtype=np.float64).reshape(1, 8, 1))
        out = ops.gate(x, axis=1)
        assert np.array_equal(out.data[0, :, 0], np.array([0, 1, 2, 3]) * np.array([4, 5, 6, 7]))

    def test_stack_and_narrow(self):
        a = uniform([2, 3], seed=1)
        b = uniform([2, 3], seed=2)
        s = ops.stack([a, b], axis=0)
        assert s.shape == (2, 2, 3)
        assert np.array_equal(ops.narrow(s, 0, 1, 1).data[0], b.data)


class TestLayerNorm:
    def test_normalizes_before_affine(self):
        rng = np.random.default_rng(2)
        x = Tensor(rng.normal(size=(5, 16, 3)))
        g = Tensor(np.ones(16))
        b = Tensor(np.zeros(16))
        out = ops.layer_norm(x, g, b, axis=1).data
        assert np.max(np.abs(out.mean(axis=1))) < 1e-6
        assert np.max(np.abs(out.var(axis=1) - 1.0)) < 1e-5

    def test_affine_applies(self):
        x = Tensor(np.random.default_rng(3).normal(size=(4, 8)))
        g = Tensor(np.full(8, 2.0))
        b = Tensor(np.full(8, -1.0))
        plain = ops.layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8)), axis=1).data
        affine = ops.layer_norm(x, g, b, axis=1).data
        assert np.allclose(affine, plain * 2.0 - 1.0, atol=1e-12)


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = uniform([3, 4], seed=5, watched=True)
        with Tape() as tape:
            grads = tape.backward(ops.tsum(x))
        assert np.array_equal(grads[x], np.ones((3, 4), dtype=np.float32))

    def test_half_square_gradient_is_x(self):
        x = uniform([6], seed=7, dtype=np.float64, watched=True)
        with Tape() as tape:
            loss = ops.scale(ops.tsum(ops.mul(x, x)), 0.5)
            grads = tape.backward(loss)
        assert np.allclose(grads[x], x.data, atol=1e-12)

    def test_non_scalar_loss_rejected(self):
        x = uniform([3], seed=1, watched=True)
        with Tape() as tape:
            y = ops.mul(x, x)
            with pytest.raises(Exception):
                tape.backward(y)

    def test_unreached_leaf_gets_zero_gradient(self):
        x = uniform([3], seed=1, dtype=np.float64, watched=True)
        y = uniform([3], seed=2, dtype=np.float64, watched=True)
        with Tape() as tape:
            loss = ops.tsum(ops.mul(x, x))
            _ = ops.tsum(y)  # on tape, not part of the loss
            grads = tape.backward(loss)
        assert np.array_equal(grads[y], np.zeros(3))

    def test_repeated_fresh_tapes_bit_identical(self):
        x = uniform([4, 4], seed=12, dtype=np.float64, watched=True)
        w = uniform([4, 4], seed=13, dtype=np.float64, watched=True)
        results = []
        for _ in range(2):
            with Tape() as tape:
                y = ops.softmax(ops.matmul(x, w), axis=1)
                grads = tape.backward(ops.tsum(ops.mul(y, y)))
            results.append((grads[x].copy(), grads[w].copy()))
        assert np.array_equal(results[0][0], results[1][0])
        assert np.array_equal(results[0][1], results[1][1])

    def test_broadcast_add_gradient(self):
        x = uniform([2, 3], seed=1, dtype=np.float64, watched=True)
        b = uniform([3], seed=2, dtype=np.float64, watched=True)
        with Tape() as tape:
            grads = tape.backward(ops.tsum(ops.add(x, b)))
        assert np.array_equal(grads[b], np.full(3, 2.0))
