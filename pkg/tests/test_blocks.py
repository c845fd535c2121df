import numpy as np
import pytest

from causalclean import ShapeError, Tensor, ops, uniform
from causalclean.blocks import (ChannelLinear, GatedConvBlock, PatchGrid,
                                SpatialAttention, crop_to, pad_to_multiple,
                                patchify, qkv_project, unpatchify)
from causalclean.gradcheck import check_gradient


def rng(seed=0):
    return np.random.default_rng(seed)


class TestPatchGrid:
    def test_counts(self):
        g = PatchGrid(c=1, h=4, w=4, p1=2, p2=2)
        assert (g.n_h, g.n_w, g.n, g.d) == (2, 2, 4, 4)

    def test_indivisible_rejected(self):
        with pytest.raises(ShapeError):
            PatchGrid(c=1, h=5, w=4, p1=2, p2=2)

    def test_patchify_counts(self):
        f = uniform([1, 4, 4], seed=1)
        g = PatchGrid.fit(f.shape, 2, 2)
        p = patchify(f, g)
        assert p.shape == (4, 4)

    def test_roundtrip_identity(self):
        f = uniform([3, 8, 6], seed=2)
        g = PatchGrid.fit(f.shape, 2, 3)
        assert np.array_equal(unpatchify(patchify(f, g), g).data, f.data)

    def test_patch_zero_is_top_left_block(self):
        f = Tensor(np.arange(16, dtype=np.float32).reshape(1, 4, 4))
        g = PatchGrid.fit(f.shape, 2, 2)
        p = patchify(f, g)
        assert sorted(p.data[0].tolist()) == [0.0, 1.0, 4.0, 5.0]
        # row-major patch order: patch 1 is the top-right block
        assert sorted(p.data[1].tolist()) == [2.0, 3.0, 6.0, 7.0]

    def test_batched_patchify(self):
        f = uniform([3, 2, 4, 4], seed=3)
        g = PatchGrid.fit(f.shape, 2, 2)
        p = patchify(f, g)
        assert p.shape == (3, 4, 8)
        single = patchify(ops.narrow(f, 0, 1, 1), g)
        assert np.array_equal(p.data[1], single.data[0])

    def test_pad_crop_roundtrip(self):
        f = uniform([2, 5, 7], seed=4)
        padded, (h, w) = pad_to_multiple(f, 4, 4)
        assert padded.shape == (2, 8, 8)
        assert np.array_equal(crop_to(padded, h, w).data, f.data)

    def test_pad_is_reflection(self):
        f = Tensor(np.arange(4, dtype=np.float32).reshape(1, 4, 1))
        padded, _ = pad_to_multiple(f, 6, 1)
        assert np.array_equal(padded.data[0, :, 0], [0, 1, 2, 3, 2, 1])


class TestQkvProject:
    def _grid(self, f):
        return PatchGrid.fit(f.shape, 2, 2)

    def test_identity_weights(self):
        f = uniform([3, 4, 4], seed=5)
        g = self._grid(f)
        eye = ChannelLinear(3, 3, rng())
        eye.w.data = np.eye(3, dtype=np.float32)
        q, k, v = qkv_project(f, g, eye, eye, eye)
        assert np.array_equal(q.data, patchify(f, g).data)
        assert np.array_equal(k.data, v.data)

    def test_zero_weights(self):
        f = uniform([3, 4, 4], seed=6)
        g = self._grid(f)
        zero = ChannelLinear(3, 3, rng(), zero_init=True)
        q, _, _ = qkv_project(f, g, zero, zero, zero)
        assert not q.data.any()

    def test_weight_gradient_matches_fd(self):
        f = rng(7).normal(size=(2, 4, 4))

        def loss(w):
            lin = ChannelLinear(2, 2, rng())
            lin.w = w
            g = PatchGrid.fit(f.shape, 2, 2)
            q, _, _ = qkv_project(Tensor(f), g, lin, lin, lin)
            return ops.tsum(q)

        result = check_gradient("qkv_w", loss, [rng(8).normal(size=(2, 2))])
        assert result.ok, result.line()


class TestSpatialAttention:
    def test_constant_input_constant_output(self):
        att = SpatialAttention(c=3, patch=2, rng=rng(1))
        f = Tensor(np.ones((3, 4, 4), dtype=np.float32) * 0.7)
        out = att(f)
        for c in range(3):
            assert np.allclose(out.data[c], out.data[c, 0, 0], atol=1e-6)

    def test_shape_preserved(self):
        att = SpatialAttention(c=4, patch=2, rng=rng(2))
        f = uniform([4, 6, 8], seed=9)
        assert att(f).shape == f.shape

    def test_shape_preserved_with_padding(self):
        att = SpatialAttention(c=2, patch=4, rng=rng(3))
        f = uniform([2, 5, 7], seed=10)
        assert att(f).shape == f.shape

    def test_single_patch_closed_form(self):
        # one patch: the only attention weight is exactly 1, so the output is
        # the W_o projection of the single value patch
        att = SpatialAttention(c=2, patch=4, rng=rng(4))
        f = uniform([2, 4, 4], seed=11)
        out = att(f)
        expected = att.wo(att.wv(f))
        assert np.allclose(out.data, expected.data, atol=1e-6)

    def test_multihead_shapes(self):
        att = SpatialAttention(c=4, patch=2, rng=rng(5), heads=2)
        f = uniform([4, 4, 4], seed=12)
        assert att(f).shape == f.shape


class TestGatedConvBlock:
    def test_zero_init_is_identity(self):
        block = GatedConvBlock(c=4, rng=rng(6))
        f = uniform([4, 6, 6], seed=13)
        assert np.array_equal(block(f).data, f.data)

    def test_shape_preserved(self):
        block = GatedConvBlock(c=3, rng=rng(7))
        assert block(uniform([3, 5, 5], seed=14)).shape == (3, 5, 5)

    def test_gradient_reaches_every_parameter(self):
        block = GatedConvBlock(c=2, rng=rng(8))
        # randomize the zero-initialized projection so inner grads are not
        # structurally zero
        block.project.w.data = rng(9).normal(size=block.project.w.shape).astype(np.float32) * 0.1
        f = Tensor(rng(10).normal(size=(2, 4, 4)).astype(np.float32), watched=True)
        from causalclean import Tape
        with Tape() as tape:
            out = block(f)
            grads = tape.backward(ops.tsum(ops.mul(out, out)))
        for name, p in block.named_params().items():
            assert np.abs(grads[p]).max() > 0, f"dead parameter {name}"

    def test_block_gradient_matches_fd(self):
        def loss(f, pw):
            block = GatedConvBlock(c=2, rng=rng(11)).astype(np.float64)
            block.project.w = pw
            r = Tensor(rng(12).normal(size=(2, 4, 4)))
            return ops.tsum(ops.mul(block(f), r))

        f0 = rng(13).normal(size=(2, 4, 4))
        pw0 = rng(14).normal(size=(2, 4, 1, 1)) * 0.3
        result = check_gradient("gated_block", loss, [f0, pw0])
        assert result.ok, result.line()
