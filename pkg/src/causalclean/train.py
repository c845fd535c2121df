"""Training loop: synthetic pairs, clip recurrence, Adam with cosine decay.

Degraded inputs are synthesized once up front (one sigma and one noise
realization per video, seeded from the master seed), so a run is a pure
function of its configuration and resuming from a checkpoint reproduces the
uninterrupted trajectory bit for bit. Per-iteration choices (which video,
which crop/flip) come from seeds derived with :func:`derive_seed`, never from
shared RNG state.
"""

import hashlib

import numpy as np

from .data import crop_augment, degrade, l1_loss
from .optim import Adam, cosine_lr
from .tensor import ShapeError, Tape, Tensor


def derive_seed(master, *parts):
    """Stable sub-seed from the master seed and a label path."""
    text = ":".join([str(master)] + [str(p) for p in parts])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


def build_pairs(videos, spec, master_seed):
    """[(degraded, clean)] with one degradation seed per video."""
    pairs = []
    for v, clean in enumerate(videos):
        vspec = type(spec)(**{**spec.__dict__, "seed": derive_seed(master_seed, "degrade", v)})
        pairs.append((degrade(clean, vspec), np.asarray(clean, dtype=np.float64)))
    return pairs


class Trainer:
    """Owns the parameter set and optimizer state for one run."""

    def __init__(self, model, pairs, opt_cfg, master_seed=0):
        if not pairs:
            raise ShapeError("training set is empty")
        for lq, gt in pairs:
            if lq.shape != gt.shape:
                raise ShapeError(f"pair shapes differ: {lq.shape} vs {gt.shape}")
            if opt_cfg.crop > min(lq.shape[-2], lq.shape[-1]):
                raise ShapeError(f"crop {opt_cfg.crop} exceeds frame extents "
                                 f"{lq.shape[-2:]}")
        self.model = model
        self.pairs = pairs
        self.cfg = opt_cfg
        self.seed = master_seed
        self.iteration = 0
        self.optimizer = Adam(model.named_params(), opt_cfg)

    def _sample(self, iteration):
        """Deterministic (degraded, clean) crop for one iteration."""
        pick = derive_seed(self.seed, "pick", iteration) % len(self.pairs)
        lq, gt = self.pairs[pick]
        stacked = np.concatenate([lq, gt], axis=1)  # same crop/flip for both
        stacked = crop_augment(stacked, self.cfg.crop,
                               seed=derive_seed(self.seed, "augment", iteration),
                               hflip=self.cfg.hflip, vflip=self.cfg.vflip,
                               rot90=self.cfg.rot90)
        c = lq.shape[1]
        return stacked[:, :c], stacked[:, c:]

    def step(self):
        """One optimization step; returns (iteration, loss, lr)."""
        i = self.iteration
        lq, gt = self._sample(i)
        dtype = self.model.config.dtype
        with Tape() as tape:
            restored = self.model.restore_clip(Tensor(lq.astype(dtype)))
            loss = l1_loss(restored, Tensor(gt.astype(dtype)))
            grads = tape.backward(loss)
        lr = cosine_lr(i, self.cfg)
        self.optimizer.step(grads, lr)
        self.iteration = i + 1
        return i, loss.item(), lr

    def run(self, iterations=None, log=None):
        """Advance up to ``iterations`` steps (default: the configured total).

        ``log`` receives one plain-text line per step.
        """
        stop = self.cfg.iterations if iterations is None else \
            min(self.cfg.iterations, self.iteration + iterations)
        while self.iteration < stop:
            i, loss, lr = self.step()
            if log is not None:
                log(f"iter {i} loss {loss:.6f} lr {lr:.3e}")
        return self.iteration

    # -- checkpoint plumbing --------------------------------------------
    def state_arrays(self):
        arrays = {f"param.{n}": p.data for n, p in self.model.named_params().items()}
        arrays.update(self.optimizer.state_arrays())
        arrays["trainer.iteration"] = np.array([self.iteration], dtype=np.float64)
        return arrays

    def load_state_arrays(self, arrays):
        params = {n: arrays[f"param.{n}"]
                  for n in self.model.named_params()}
        self.model.load_params(params)
        self.optimizer.load_state_arrays(arrays)
        self.iteration = int(arrays["trainer.iteration"][0])
