"""Causal history conditioning: queue, patch alignment, channel routing.

The restoration of frame t is conditioned on the feature maps of frames
before t. A per-block ring buffer keeps the last ``capacity`` maps; the
alignment block matches current-frame patches to the top-k most similar
patches of each history frame; the router then re-weights the (tau+1) aligned
slots with channel-wise cross attention and adds the identity skip.
"""

from collections import deque

import numpy as np

from . import ops
from .blocks import (ChannelLinear, Module, PatchGrid, SpatialAttention,
                     crop_to, init_scalar, pad_to_multiple, patchify,
                     qkv_project, split_heads, merge_heads, unpatchify,
                     swap_last_axes)
from .tensor import ShapeError, Tensor


class EmptyHistoryError(RuntimeError):
    """History view requested from an empty queue without a warm-up fallback."""


class HistoryQueue:
    """Ring buffer of the most recent feature maps for one block.

    Push beyond capacity evicts the oldest entry; push and view are O(1) in
    the number of stored frames. All entries must share one [c, h, w] shape.
    """

    def __init__(self, capacity, stage=""):
        if capacity < 1:
            raise ShapeError(f"queue capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.stage = stage
        self._buf = deque(maxlen=capacity)

    def __len__(self):
        return len(self._buf)

    def push(self, f):
        if self._buf and f.shape != self._buf[-1].shape:
            raise ShapeError(
                f"queue {self.stage!r} holds {self._buf[-1].shape}, got {f.shape}")
        self._buf.append(f)

    def entries(self):
        return list(self._buf)

    def clear(self):
        self._buf.clear()


def history_view(queue, tau, fallback=None):
    """Stack of the tau most recent entries, oldest first: [tau, c, h, w].

    When fewer than tau entries exist the earliest one is replicated to fill
    (warm-up). An empty queue uses ``fallback`` as that earliest entry; with
    no fallback it is an error.
    """
    if tau < 1:
        raise ShapeError(f"history length must be >= 1, got {tau}")
    entries = queue.entries()[-tau:]
    if not entries:
        if fallback is None:
            raise EmptyHistoryError(f"queue {queue.stage!r} is empty")
        entries = [fallback]
    while len(entries) < tau:
        entries.insert(0, entries[0])
    return ops.stack(entries, axis=0)


class HistoryAlign(Module):
    """Per-history-frame top-k patch attention against the current frame.

    Queries come from the current frame; each history frame supplies its own
    keys and values. Scores are masked to the k largest keys per query row
    (per history frame) before the softmax, then the weighted value patches
    are projected back to feature-map layout.
    """

    def __init__(self, c, patch, rng, heads=1):
        self.wq = ChannelLinear(c, c, rng)
        self.wk = ChannelLinear(c, c, rng)
        self.wv = ChannelLinear(c, c, rng)
        self.wo = ChannelLinear(c, c, rng)
        self.c, self.patch, self.heads = c, patch, heads
        self.alpha = init_scalar(1.0 / np.sqrt(c * patch * patch / heads))

    def scores(self, f, history):
        """Raw (scaled, unmasked) attention scores [tau, heads, n, n]."""
        f_pad, _ = pad_to_multiple(f, self.patch, self.patch)
        h_pad, _ = pad_to_multiple(history, self.patch, self.patch)
        grid = PatchGrid.fit(f_pad.shape, self.patch, self.patch)
        q = split_heads(patchify(self.wq(f_pad), grid), self.heads)
        k = split_heads(patchify(self.wk(h_pad), grid), self.heads)
        return ops.mul(ops.matmul(q, ops.transpose(k, swap_last_axes(k.ndim))), self.alpha)

    def __call__(self, f, history, k, dense=False):
        if history.ndim != 4 or history.shape[1:] != f.shape:
            raise ShapeError(f"history {history.shape} does not stack {f.shape}")
        f_pad, (h, w) = pad_to_multiple(f, self.patch, self.patch)
        h_pad, _ = pad_to_multiple(history, self.patch, self.patch)
        grid = PatchGrid.fit(f_pad.shape, self.patch, self.patch)
        if not dense and not 1 <= k <= grid.n:
            raise ShapeError(f"k={k} outside [1, {grid.n}] for this grid")
        q = split_heads(patchify(self.wq(f_pad), grid), self.heads)
        kk = split_heads(patchify(self.wk(h_pad), grid), self.heads)
        vv = split_heads(patchify(self.wv(h_pad), grid), self.heads)
        scores = ops.mul(ops.matmul(q, ops.transpose(kk, swap_last_axes(kk.ndim))),
                         self.alpha)
        if not dense:
            scores = ops.topk_mask(scores, k, axis=-1)
        attn = ops.softmax(scores, axis=-1)
        out = merge_heads(ops.matmul(attn, vv))
        return crop_to(self.wo(unpatchify(out, grid)), h, w)


class HistoryRouter(Module):
    """Cross-frame channel attention over the aligned history.

    Channel queries of the current frame attend over the (tau+1)*c channels
    of the aligned stack (channels collapse across the temporal axis); the
    projected result rides on an identity skip of the input. Query and key
    rows are L2-normalized along the spatial axis before the scaled dot
    product: raw channel dots grow with h*w, so an unnormalized softmax is
    uniform at any fixed temperature and breaks when the eval resolution
    differs from training. The output projection starts at zero, so a fresh
    router is the identity.
    """

    def __init__(self, c, rng):
        self.wq = ChannelLinear(c, c, rng)
        self.wk = ChannelLinear(c, c, rng)
        self.wv = ChannelLinear(c, c, rng)
        self.wo = ChannelLinear(c, c, rng, zero_init=True)
        self.c = c
        self.alpha = init_scalar(1.0)  # temperature on cosine-similarity scores

    def __call__(self, f, aligned):
        c, h, w = f.shape
        if aligned.ndim != 4 or aligned.shape[1:] != f.shape:
            raise ShapeError(f"aligned stack {aligned.shape} does not match {f.shape}")
        slots = aligned.shape[0]
        q = ops.l2_normalize(ops.reshape(self.wq(f), (c, h * w)), axis=-1)
        k = ops.l2_normalize(ops.reshape(self.wk(aligned), (slots * c, h * w)), axis=-1)
        v = ops.reshape(self.wv(aligned), (slots * c, h * w))
        scores = ops.mul(ops.matmul(q, ops.transpose(k, (1, 0))), self.alpha)
        attn = ops.softmax(scores, axis=-1)  # rows normalize over key channels
        y = ops.reshape(ops.matmul(attn, v), (c, h, w))
        return ops.add(self.wo(y), f)


class CausalHistoryBlock(Module):
    """Full history-conditioned unit: align, concat the transformed input,
    route, and record the block input in the private queue."""

    def __init__(self, c, patch, tau, k, capacity, rng, heads=1,
                 dense_softmax=False, stage=""):
        if tau > capacity:
            raise ShapeError(f"history length {tau} exceeds queue capacity {capacity}")
        self.align = HistoryAlign(c, patch, rng, heads=heads)
        self.input_transform = SpatialAttention(c, patch, rng, heads=heads)
        self.router = HistoryRouter(c, rng)
        self.tau, self.k = tau, k
        self.capacity = capacity
        self.dense_softmax = dense_softmax
        self.stage = stage

    def new_queue(self):
        return HistoryQueue(self.capacity, stage=self.stage)

    def effective_k(self, f):
        """Configured k capped at the patch count of this feature size."""
        f_pad, _ = pad_to_multiple(f, self.align.patch, self.align.patch)
        grid = PatchGrid.fit(f_pad.shape, self.align.patch, self.align.patch)
        return min(self.k, grid.n)

    def state_align(self, f, history):
        """Aligned history plus the transformed current frame: [(tau+1),c,h,w].

        The last slot along axis 0 is the current frame's transformation; the
        first tau slots are the motion-compensated history frames.
        """
        aligned = self.align(f, history, self.effective_k(f),
                             dense=self.dense_softmax)
        current = self.input_transform(f)
        return ops.concat([aligned, ops.reshape(current, (1,) + current.shape)], axis=0)

    def __call__(self, f, queue):
        view = history_view(queue, self.tau, fallback=f)
        y = self.router(f, self.state_align(f, view))
        queue.push(f)
        return y
