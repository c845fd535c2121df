import numpy as np
import pytest

from causalclean import ShapeError, Tape, Tensor, ops, uniform
from causalclean.model import ModelConfig, RestorationModel


def tiny_config(**kw):
    args = dict(stages=3, base_width=4, in_channels=3, enc_blocks=1,
                chm_blocks=1, tau=2, k=2, gamma=3, patch=(2, 2, 2))
    args.update(kw)
    return ModelConfig(**args)


def randomize_zero_inits(model, seed=99):
    """Give the zero-initialized projections small random values so gradient
    connectivity is observable."""
    rng = np.random.default_rng(seed)
    for name, p in model.named_params().items():
        if not p.data.any():
            p.data = (rng.normal(size=p.shape) * 0.05).astype(p.dtype)
    return model


class TestConfig:
    def test_tau_gamma_validation(self):
        with pytest.raises(ShapeError):
            ModelConfig(tau=6, gamma=5)

    def test_patch_broadcast(self):
        cfg = ModelConfig(stages=3)
        assert cfg.patch == (4, 4, 4)

    def test_roundtrip_dict(self):
        cfg = tiny_config()
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg

    def test_bad_placement(self):
        with pytest.raises(ShapeError):
            ModelConfig(chm_placement="decoder_only")


class TestEncoder:
    def test_width_doubling_arithmetic(self):
        cfg = ModelConfig(stages=3, base_width=8, in_channels=3, enc_blocks=1)
        model = RestorationModel(cfg, seed=0)
        frame = uniform([3, 64, 64], seed=1)
        skips, latent = model.encode(frame)
        assert latent.shape == (32, 16, 16)
        assert [s.shape for s in skips] == [(8, 64, 64), (16, 32, 32)]

    def test_encoder_is_frame_pure(self):
        model = RestorationModel(tiny_config(), seed=1)
        f = uniform([3, 8, 8], seed=2)
        other = uniform([3, 8, 8], seed=3)
        _, latent_a = model.encode(f)
        model.encode(other)  # unrelated frame in between
        _, latent_b = model.encode(f)
        assert np.array_equal(latent_a.data, latent_b.data)

    def test_zero_input_zero_biases_zero_latent(self):
        model = RestorationModel(tiny_config(), seed=2)
        for name, p in model.named_params().items():
            if name.endswith(".b") or name.endswith("bias"):
                p.data = np.zeros_like(p.data)
        _, latent = model.encode(Tensor(np.zeros((3, 8, 8), dtype=np.float32)))
        assert np.allclose(latent.data, 0.0, atol=1e-7)


class TestDecoder:
    def test_latent_only_placement_has_no_decoder_queues(self):
        model = RestorationModel(tiny_config(chm_placement="latent_only"), seed=3)
        queues = model.make_queues()
        assert list(queues) == ["latent.0"]
        clip = uniform([3, 3, 8, 8], seed=4)
        out = model.restore_clip(clip)
        assert out.shape == clip.shape

    def test_restored_extents_match_input(self):
        model = RestorationModel(tiny_config(), seed=4)
        frame = uniform([3, 10, 14], seed=5)  # not divisible by 4
        out = model.forward_frame(frame, model.make_queues())
        assert out.shape == frame.shape

    def test_fresh_model_is_identity(self):
        model = RestorationModel(tiny_config(), seed=5)
        frame = uniform([3, 8, 8], seed=6)
        out = model.forward_frame(frame, model.make_queues())
        assert np.array_equal(out.data, frame.data)


class TestRestoreClip:
    def test_clip_shape_and_warmup(self):
        model = RestorationModel(tiny_config(), seed=6)
        clip = uniform([5, 3, 8, 8], seed=7)
        out = model.restore_clip(clip)
        assert out.shape == clip.shape
        assert np.all(np.isfinite(out.data))

    def test_empty_clip_rejected(self):
        model = RestorationModel(tiny_config(), seed=7)
        with pytest.raises(ShapeError):
            model.restore_clip(Tensor(np.zeros((0, 3, 8, 8), dtype=np.float32)))

    def test_identical_frames_restore_identically(self):
        model = randomize_zero_inits(RestorationModel(tiny_config(), seed=8))
        frame = uniform([3, 8, 8], seed=9)
        clip = ops.stack([frame] * 4, axis=0)
        out = model.restore_clip(clip).data
        for t in range(1, 4):
            assert np.array_equal(out[t], out[0])

    def test_causality_perturbation(self):
        model = randomize_zero_inits(RestorationModel(tiny_config(), seed=10))
        base = np.random.default_rng(11).random((4, 3, 8, 8)).astype(np.float32)
        out_a = model.restore_clip(Tensor(base)).data
        for j in [1, 3]:
            bumped = base.copy()
            bumped[j] += 0.25
            out_b = model.restore_clip(Tensor(bumped)).data
            assert np.array_equal(out_b[:j], out_a[:j])
            assert not np.array_equal(out_b[j], out_a[j])

    def test_deterministic_across_runs(self):
        clip = uniform([3, 3, 8, 8], seed=12)
        outs = [RestorationModel(tiny_config(), seed=13).restore_clip(clip).data
                for _ in range(2)]
        assert np.array_equal(outs[0], outs[1])

    def test_topk_full_bitwise_equals_dense(self):
        model = randomize_zero_inits(RestorationModel(tiny_config(k=1000), seed=14))
        clip = uniform([3, 3, 8, 8], seed=15)
        out_topk = model.restore_clip(clip).data
        for _, block in model.history_blocks():
            block.dense_softmax = True
        out_dense = model.restore_clip(clip).data
        assert np.array_equal(out_topk, out_dense)


class TestGradientFlow:
    def test_every_parameter_reached_from_clip_loss(self):
        # 16x16 input keeps every attention grid above one patch; a 1-patch
        # grid has constant softmax weights and (correctly) zero gradient
        # into its query/key projections
        model = randomize_zero_inits(RestorationModel(tiny_config(), seed=16))
        clip = Tensor(np.random.default_rng(17).random((3, 3, 16, 16)).astype(np.float32))
        target = Tensor(np.random.default_rng(18).random((3, 3, 16, 16)).astype(np.float32))
        with Tape() as tape:
            out = model.restore_clip(clip)
            loss = ops.tmean(ops.absolute(ops.sub(out, target)))
            grads = tape.backward(loss)
        for name, p in model.named_params().items():
            assert p in grads and np.abs(grads[p]).max() > 0, f"dead parameter {name}"
