"""Recurrent restoration U-Net.

The encoder processes each frame on its own (no temporal state anywhere);
history conditioning lives in the latent stage and, optionally, every decoder
stage. Channels double at each downsample; resampling is pixel shuffle +
1x1 projection in both directions, so it is exactly invertible arithmetic.
The output head is zero-initialized and produces a residual on the input
frame, so a fresh model is the identity map.
"""

from dataclasses import dataclass, field, asdict

import numpy as np

from . import ops
from .blocks import (ChannelLinear, Conv, GatedConvBlock, Module, crop_to,
                     pad_to_multiple)
from .history import CausalHistoryBlock
from .tensor import ShapeError

PLACEMENTS = ("latent_only", "latent_and_decoder")
TOPK_MODES = ("topk", "dense_softmax")


@dataclass
class ModelConfig:
    """Architecture hyperparameters; weights are derivable from these alone."""

    stages: int = 3
    base_width: int = 16
    in_channels: int = 3
    enc_blocks: int = 2          # gated-conv blocks per encoder stage
    chm_blocks: int = 1          # history blocks per latent/decoder stage
    tau: int = 3                 # history frames consumed per step
    k: int = 5                   # retrieval width (capped at the patch count)
    gamma: int = 5               # queue capacity == training clip length
    patch: tuple = ()            # per-stage patch size; empty -> 4 everywhere
    heads: int = 1
    chm_placement: str = "latent_and_decoder"
    topk_mode: str = "topk"
    precision: str = "f32"
    ffn_expansion: int = 2

    def __post_init__(self):
        if self.stages < 2:
            raise ShapeError("need at least 2 stages (1 encoder + latent)")
        if not self.patch:
            self.patch = tuple([4] * self.stages)
        else:
            self.patch = tuple(int(p) for p in self.patch)
        if len(self.patch) != self.stages:
            raise ShapeError(f"need one patch size per stage, got {self.patch}")
        if self.tau > self.gamma:
            raise ShapeError(f"history length {self.tau} exceeds queue capacity {self.gamma}")
        if self.tau < 1 or self.k < 1 or self.gamma < 1:
            raise ShapeError("tau, k and gamma must be positive")
        if self.chm_placement not in PLACEMENTS:
            raise ShapeError(f"placement must be one of {PLACEMENTS}")
        if self.topk_mode not in TOPK_MODES:
            raise ShapeError(f"topk_mode must be one of {TOPK_MODES}")
        if self.precision not in ("f32", "f64"):
            raise ShapeError("precision must be 'f32' or 'f64'")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    def width(self, stage):
        return self.base_width * (2 ** stage)

    def to_dict(self):
        d = asdict(self)
        d["patch"] = list(self.patch)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["patch"] = tuple(d.get("patch") or ())
        return cls(**d)


class Downsample(Module):
    """pixel_unshuffle(2) then 1x1 projection: [c,h,w] -> [2c,h/2,w/2]."""

    def __init__(self, c, rng):
        self.proj = ChannelLinear(4 * c, 2 * c, rng)

    def __call__(self, x):
        return self.proj(ops.pixel_unshuffle(x, 2))


class Upsample(Module):
    """1x1 projection then pixel_shuffle(2): [2c,h,w] -> [c,2h,2w]."""

    def __init__(self, c, rng):  # c is the stage width after upsampling
        self.proj = ChannelLinear(2 * c, 4 * c, rng)

    def __call__(self, x):
        return ops.pixel_shuffle(self.proj(x), 2)


class RestorationModel(Module):
    """Full U-Net with per-block history queues."""

    def __init__(self, config, seed=0):
        rng = np.random.default_rng(seed)
        self.config = config
        cfg = config
        s = cfg.stages
        self.head = Conv(cfg.in_channels, cfg.base_width, 3, rng, padding=1)
        self.enc_stages = [
            [GatedConvBlock(cfg.width(i), rng, expansion=cfg.ffn_expansion)
             for _ in range(cfg.enc_blocks)]
            for i in range(s - 1)
        ]
        self.downs = [Downsample(cfg.width(i), rng) for i in range(s - 1)]
        dense = cfg.topk_mode == "dense_softmax"
        self.latent_blocks = [
            CausalHistoryBlock(cfg.width(s - 1), cfg.patch[s - 1], cfg.tau, cfg.k,
                               cfg.gamma, rng, heads=cfg.heads, dense_softmax=dense,
                               stage=f"latent.{b}")
            for b in range(cfg.chm_blocks)
        ]
        self.ups = [Upsample(cfg.width(i), rng) for i in range(s - 1)]
        self.skip_merge = [ChannelLinear(2 * cfg.width(i), cfg.width(i), rng)
                           for i in range(s - 1)]
        if cfg.chm_placement == "latent_and_decoder":
            self.dec_stages = [
                [CausalHistoryBlock(cfg.width(i), cfg.patch[i], cfg.tau, cfg.k,
                                    cfg.gamma, rng, heads=cfg.heads,
                                    dense_softmax=dense, stage=f"dec{i}.{b}")
                 for b in range(cfg.chm_blocks)]
                for i in range(s - 1)
            ]
        else:
            self.dec_stages = [
                [GatedConvBlock(cfg.width(i), rng, expansion=cfg.ffn_expansion)
                 for _ in range(cfg.chm_blocks)]
                for i in range(s - 1)
            ]
        self.tail = Conv(cfg.base_width, cfg.in_channels, 3, rng, zero_init=True,
                         padding=1)
        if cfg.precision == "f64":
            self.astype(np.float64)

    # -- queues ----------------------------------------------------------
    def history_blocks(self):
        """(name, block) pairs for every history-conditioned unit."""
        out = [(b.stage, b) for b in self.latent_blocks]
        if self.config.chm_placement == "latent_and_decoder":
            for stage in self.dec_stages:
                out.extend((b.stage, b) for b in stage)
        return out

    def make_queues(self):
        """Fresh per-block queues for one clip's recurrence."""
        return {name: block.new_queue() for name, block in self.history_blocks()}

    # -- forward ----------------------------------------------------------
    def encode(self, frame):
        """Frame encoder: list of skip features (shallow first) + latent.

        Reads and writes no temporal state; accepts one [c,h,w] frame or a
        [t,c,h,w] batch (frames stay independent either way).
        """
        x = self.head(frame)
        skips = []
        for blocks, down in zip(self.enc_stages, self.downs):
            for block in blocks:
                x = block(x)
            skips.append(x)
            x = down(x)
        return skips, x

    def decode(self, latent, skips, queues):
        """History-conditioned decoder; returns the frame residual."""
        x = latent
        for block in self.latent_blocks:
            x = block(x, queues[block.stage])
        for i in reversed(range(self.config.stages - 1)):
            x = self.ups[i](x)
            x = self.skip_merge[i](ops.concat([x, skips[i]], axis=x.ndim - 3))
            for block in self.dec_stages[i]:
                if isinstance(block, CausalHistoryBlock):
                    x = block(x, queues[block.stage])
                else:
                    x = block(x)
        return self.tail(x)

    def forward_frame(self, frame, queues):
        """Restore one [c,h,w] frame, updating the clip's queues."""
        if frame.ndim != 3 or frame.shape[0] != self.config.in_channels:
            raise ShapeError(f"expected [{self.config.in_channels},h,w] frame, "
                             f"got {frame.shape}")
        m = 2 ** (self.config.stages - 1)
        padded, (h, w) = pad_to_multiple(frame, m, m)
        skips, latent = self.encode(padded)
        residual = self.decode(latent, skips, queues)
        return crop_to(ops.add(padded, residual), h, w)

    def restore_clip(self, clip):
        """Restore a [t,c,h,w] clip in temporal order with fresh queues.

        The encoder runs batched over the whole clip (it is frame-pure);
        the decoder recurrence then walks the frames in order.
        """
        if clip.ndim != 4 or clip.shape[0] < 1:
            raise ShapeError(f"expected a non-empty [t,c,h,w] clip, got {clip.shape}")
        if clip.shape[1] != self.config.in_channels:
            raise ShapeError(f"expected {self.config.in_channels}-channel frames, "
                             f"got {clip.shape}")
        queues = self.make_queues()
        m = 2 ** (self.config.stages - 1)
        padded, (h, w) = pad_to_multiple(clip, m, m)
        skips, latent = self.encode(padded)
        outs = []
        for t in range(clip.shape[0]):
            lat_t = ops.reshape(ops.narrow(latent, 0, t, 1), latent.shape[1:])
            skips_t = [ops.reshape(ops.narrow(s, 0, t, 1), s.shape[1:]) for s in skips]
            residual = self.decode(lat_t, skips_t, queues)
            frame = ops.reshape(ops.narrow(padded, 0, t, 1), padded.shape[1:])
            outs.append(crop_to(ops.add(frame, residual), h, w))
        return ops.stack(outs, axis=0)
