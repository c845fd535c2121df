"""Time-variant linear state-space reference recurrence.

Under perfect motion compensation and no degradation the history update
collapses to H_t = A_t H_{t-1} + B_t F_t with readout y_t = C_t H_t. This
module implements that recurrence exactly (plain float64 numpy, no tape); it
serves as the analytic reference the recurrent restoration path is compared
against in tests.
"""

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError


@dataclass
class SsmParams:
    """Per-step linear maps over flattened features: lists of A [m,m],
    B [m,f], C [o,m], one triple per timestep."""

    a: list
    b: list
    c: list

    def __post_init__(self):
        if not len(self.a) == len(self.b) == len(self.c):
            raise ShapeError("need one (A, B, C) triple per step")
        for t, (a, b, c) in enumerate(zip(self.a, self.b, self.c)):
            a, b, c = np.asarray(a), np.asarray(b), np.asarray(c)
            if a.ndim != 2 or a.shape[0] != a.shape[1]:
                raise ShapeError(f"A_{t} must be square, got {a.shape}")
            if b.ndim != 2 or b.shape[0] != a.shape[0]:
                raise ShapeError(f"B_{t} {b.shape} does not conform to A_{t} {a.shape}")
            if c.ndim != 2 or c.shape[1] != a.shape[0]:
                raise ShapeError(f"C_{t} {c.shape} does not conform to A_{t} {a.shape}")

    @classmethod
    def random(cls, steps, state_dim, feat_dim, out_dim, seed=0):
        rng = np.random.default_rng(seed)
        return cls(
            a=[rng.normal(size=(state_dim, state_dim)) for _ in range(steps)],
            b=[rng.normal(size=(state_dim, feat_dim)) for _ in range(steps)],
            c=[rng.normal(size=(out_dim, state_dim)) for _ in range(steps)],
        )


def ssm_step(h_prev, f_t, a_t, b_t, c_t):
    """One exact recurrence step: returns (H_t, y_t)."""
    a_t, b_t, c_t = np.asarray(a_t), np.asarray(b_t), np.asarray(c_t)
    f_t = np.asarray(f_t, dtype=np.float64).reshape(-1)
    if f_t.shape[0] != b_t.shape[1]:
        raise ShapeError(f"feature length {f_t.shape[0]} != B columns {b_t.shape[1]}")
    if h_prev is None:
        h_prev = np.zeros(a_t.shape[0])
    h_prev = np.asarray(h_prev, dtype=np.float64).reshape(-1)
    if h_prev.shape[0] != a_t.shape[0]:
        raise ShapeError(f"state length {h_prev.shape[0]} != A size {a_t.shape[0]}")
    h_t = a_t @ h_prev + b_t @ f_t
    return h_t, c_t @ h_t


def ssm_unroll(frames, params):
    """Run the recurrence from the zero state; returns the list of outputs."""
    h = None
    outputs = []
    for t, f_t in enumerate(frames):
        if t >= len(params.a):
            raise ShapeError(f"no parameters for step {t}")
        h, y = ssm_step(h, f_t, params.a[t], params.b[t], params.c[t])
        outputs.append(y)
    return outputs
