"""Adam with cosine-annealed learning rate."""

import math
from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError


@dataclass
class OptimizerConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_init: float = 4e-4
    lr_final: float = 1e-7
    iterations: int = 2000
    crop: int = 192
    hflip: bool = True
    vflip: bool = True
    rot90: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.lr_final < self.lr_init:
            raise ShapeError(f"need 0 < lr_final < lr_init, got "
                             f"{self.lr_final} vs {self.lr_init}")
        if self.iterations < 1 or self.crop < 1:
            raise ShapeError("iterations and crop must be positive")


def cosine_lr(iteration, cfg):
    """lr(i) = lr_f + (lr_0 - lr_f) * (1 + cos(pi * i / total)) / 2."""
    if not 0 <= iteration <= cfg.iterations:
        raise ShapeError(f"iteration {iteration} outside [0, {cfg.iterations}]")
    span = cfg.lr_init - cfg.lr_final
    return cfg.lr_final + span * (1.0 + math.cos(math.pi * iteration / cfg.iterations)) / 2.0


class Adam:
    """Bias-corrected Adam over a {name: Tensor} parameter map.

    Moment buffers are keyed by parameter name so the state can round-trip
    through checkpoints.
    """

    def __init__(self, params, cfg):
        self.params = dict(params)
        self.cfg = cfg
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def step(self, grads, lr):
        """One in-place update from a {Tensor: gradient} map."""
        self.t += 1
        b1, b2, eps = self.cfg.beta1, self.cfg.beta2, self.cfg.eps
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = grads.get(p)
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ShapeError(f"{name}: gradient {g.shape} != param {p.data.shape}")
            m = self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1.0 - b2) * (g * g)
            update = (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
            p.data = p.data - update
            p.node = None

    def state_arrays(self):
        """Flat {key: array} view of the optimizer state for checkpoints."""
        out = {"adam.t": np.array([self.t], dtype=np.float64)}
        for name in self.params:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays):
        self.t = int(arrays["adam.t"][0])
        for name, p in self.params.items():
            for store, key in ((self.m, f"adam.m.{name}"), (self.v, f"adam.v.{name}")):
                arr = np.asarray(arrays[key])
                if arr.shape != p.data.shape:
                    raise ShapeError(f"{key}: stored {arr.shape} != {p.data.shape}")
                store[name] = arr.astype(p.data.dtype)
