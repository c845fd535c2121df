"""Central finite-difference verification of tape gradients.

The comparison rule: a coordinate where both |tape| and |fd| are below 1e-6
counts as exact (pure FD roundoff territory); otherwise the scaled error
|tape - fd| / (max(|tape|, |fd|) + atol/rtol) must stay within rtol. This is
the usual rtol-plus-atol reading of a relative tolerance.
"""

import time
from dataclasses import dataclass

import numpy as np

from .tensor import Tape, Tensor

EPS = 1e-4
RTOL = 1e-4
ATOL = 1e-7
_TINY = 1e-6


@dataclass
class CheckResult:
    name: str
    ok: bool
    max_rel_error: float
    coords_checked: int
    seconds: float

    def line(self):
        status = "pass" if self.ok else "FAIL"
        return (f"{status}  {self.name:<40s} rel_err={self.max_rel_error:.3e} "
                f"({self.coords_checked} coords, {self.seconds:.2f}s)")


def scaled_error(tape_grad, fd_grad):
    a = np.abs(np.asarray(tape_grad, dtype=np.float64))
    b = np.abs(np.asarray(fd_grad, dtype=np.float64))
    m = np.maximum(a, b)
    diff = np.abs(np.asarray(tape_grad, np.float64) - np.asarray(fd_grad, np.float64))
    diff = np.where(m < _TINY, 0.0, diff)
    return diff / (m + ATOL / RTOL)


def tape_gradients(f, arrays):
    """Run ``f(*tensors)`` on a fresh tape; return per-input gradients."""
    tensors = [Tensor(np.asarray(a, dtype=np.float64), watched=True) for a in arrays]
    with Tape() as tape:
        loss = f(*tensors)
        grads = tape.backward(loss)
    return [grads[t] for t in tensors]


def fd_gradient(f, arrays, wrt, coords=None, eps=EPS):
    """Central differences of scalar ``f`` w.r.t. ``arrays[wrt]``.

    ``coords`` restricts the probed flat indices (None means all of them).
    Returns (grad_estimates, coords).
    """
    work = [np.array(a, dtype=np.float64) for a in arrays]
    flat = work[wrt].reshape(-1)
    if coords is None:
        coords = np.arange(flat.size)
    out = np.zeros(len(coords))
    for row, j in enumerate(coords):
        orig = flat[j]
        flat[j] = orig + eps
        fp = f(*[Tensor(a) for a in work]).item()
        flat[j] = orig - eps
        fm = f(*[Tensor(a) for a in work]).item()
        flat[j] = orig
        out[row] = (fp - fm) / (2.0 * eps)
    return out, coords


def check_gradient(name, f, arrays, wrt=None, max_coords=None, seed=0, eps=EPS,
                   corrupt=False):
    """Compare tape gradients of scalar ``f`` against central differences.

    ``wrt`` selects which inputs to differentiate (default: all). When an
    input has more than ``max_coords`` entries, a seeded random subset of
    coordinates is probed. ``corrupt`` offsets the tape gradient before the
    comparison; it exists so the failure path of the reporting machinery can
    be exercised.
    """
    start = time.perf_counter()
    tape_grads = tape_gradients(f, arrays)
    if wrt is None:
        wrt = range(len(arrays))
    worst = 0.0
    total = 0
    rng = np.random.Generator(np.random.PCG64(seed))
    for i in wrt:
        flat = np.asarray(tape_grads[i]).reshape(-1).astype(np.float64)
        if corrupt:
            flat = flat + 1e-2
        size = flat.size
        if max_coords is not None and size > max_coords:
            coords = rng.choice(size, size=max_coords, replace=False)
            coords.sort()
        else:
            coords = np.arange(size)
        fd, coords = fd_gradient(f, arrays, i, coords=coords, eps=eps)
        err = scaled_error(flat[coords], fd)
        worst = max(worst, float(err.max()) if err.size else 0.0)
        total += len(coords)
    return CheckResult(name, worst <= RTOL, worst, total, time.perf_counter() - start)


# -- the suite -----------------------------------------------------------
#
# Everything below builds the double-precision fixtures for the standing
# gradient suite: one check per differentiable op, one per network block,
# and one whole-model check on a 2-frame 16x16 clip.


def _assign_param(module, name, tensor):
    parts = name.split(".")
    obj = module
    for part in parts[:-1]:
        obj = obj[int(part)] if isinstance(obj, (list, tuple)) else getattr(obj, part)
    setattr(obj, parts[-1], tensor)


def _randomize_zero_inits(module, seed):
    rng = np.random.Generator(np.random.PCG64(seed))
    for p in module.named_params().values():
        if not p.data.any():
            p.data = rng.normal(size=p.shape) * 0.1
        p.data = p.data.astype(np.float64)
        p.node = None


def _module_case(module, call, input_shape, seed, param_filter=None):
    """Scalar loss closure probing a module's input and parameters.

    Returns (f, arrays): arrays[0] is the input, the rest are the selected
    parameter buffers in sorted-name order; ``f`` reinstalls them on every
    call so finite differences see the perturbed values.
    """
    _randomize_zero_inits(module, seed)
    rng = np.random.Generator(np.random.PCG64(seed + 1))
    names = sorted(module.named_params())
    if param_filter is not None:
        names = [n for n in names if param_filter(n)]
    x0 = rng.normal(size=input_shape) * 0.5
    params0 = [module.named_params()[n].data.copy() for n in names]
    projection = None

    def f(x, *params):
        nonlocal projection
        for name, tensor in zip(names, params):
            _assign_param(module, name, tensor)
        out = call(module, x)
        if projection is None:
            projection = Tensor(np.random.Generator(
                np.random.PCG64(seed + 2)).normal(size=out.shape))
        from . import ops
        return ops.tsum(ops.mul(out, projection))

    return f, [x0] + params0


def op_checks(seed=0):
    """(name, f, arrays, kwargs) for every differentiable operation."""
    from . import ops
    rng = np.random.Generator(np.random.PCG64(seed))

    def proj(shape, s):
        r = Tensor(np.random.Generator(np.random.PCG64(s)).normal(size=shape))
        return lambda t: ops.tsum(ops.mul(t, r))

    scores = rng.permutation(np.linspace(-3.0, 3.0, 24)).reshape(4, 6)
    abs_in = rng.normal(size=(3, 3))
    abs_in = np.sign(abs_in) * (np.abs(abs_in) + 0.2)
    cases = [
        ("add", lambda a, b: proj((3, 4), 1)(ops.add(a, b)),
         [rng.normal(size=(3, 4)), rng.normal(size=(4,))]),
        ("sub", lambda a, b: proj((3, 4), 2)(ops.sub(a, b)),
         [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))]),
        ("mul", lambda a, b: proj((2, 3, 4), 3)(ops.mul(a, b)),
         [rng.normal(size=(2, 3, 4)), rng.normal(size=(3, 1))]),
        ("scale", lambda a: proj((5,), 4)(ops.scale(a, -1.7)), [rng.normal(size=5)]),
        ("gelu", lambda a: proj((4, 4), 5)(ops.gelu(a)), [rng.normal(size=(4, 4))]),
        ("gate", lambda a: proj((1, 3, 2), 6)(ops.gate(a, axis=1)),
         [rng.normal(size=(1, 6, 2))]),
        ("abs", lambda a: proj((3, 3), 7)(ops.absolute(a)), [abs_in]),
        ("sum", lambda a: proj((3,), 8)(ops.tsum(a, axis=1)), [rng.normal(size=(3, 5))]),
        ("mean", lambda a: ops.tmean(a), [rng.normal(size=(4, 4))]),
        ("reshape", lambda a: proj((6, 4), 9)(ops.reshape(a, (6, 4))),
         [rng.normal(size=(2, 3, 4))]),
        ("transpose", lambda a: proj((4, 2, 3), 10)(ops.transpose(a, (2, 0, 1))),
         [rng.normal(size=(2, 3, 4))]),
        ("concat", lambda a, b: proj((5, 3), 11)(ops.concat([a, b], axis=0)),
         [rng.normal(size=(2, 3)), rng.normal(size=(3, 3))]),
        ("narrow", lambda a: proj((2, 2), 12)(ops.narrow(a, 1, 1, 2)),
         [rng.normal(size=(2, 4))]),
        ("pixel_unshuffle", lambda a: proj((8, 2, 3), 13)(ops.pixel_unshuffle(a, 2)),
         [rng.normal(size=(2, 4, 6))]),
        ("pixel_shuffle", lambda a: proj((2, 4, 6), 14)(ops.pixel_shuffle(a, 2)),
         [rng.normal(size=(8, 2, 3))]),
        ("matmul", lambda a, b: proj((2, 3, 3), 15)(ops.matmul(a, b)),
         [rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 3))]),
        ("softmax", lambda a: proj((4, 6), 16)(ops.softmax(a, axis=1)),
         [rng.normal(size=(4, 6))]),
        ("topk_mask+softmax",
         lambda a: proj((4, 6), 17)(ops.softmax(ops.topk_mask(a, 3, axis=1), axis=1)),
         [scores]),
        ("l2_normalize", lambda a: proj((3, 6), 18)(ops.l2_normalize(a, axis=-1)),
         [rng.normal(size=(3, 6))]),
        ("layer_norm",
         lambda x, g, b: proj((3, 8, 2), 19)(ops.layer_norm(x, g, b, axis=1)),
         [rng.normal(size=(3, 8, 2)), rng.normal(size=8), rng.normal(size=8)]),
        ("conv2d", lambda x, w, b: proj((2, 4, 5, 5), 20)(
            ops.conv2d(x, w, b, padding=1)),
         [rng.normal(size=(2, 4, 5, 5)), rng.normal(size=(4, 4, 3, 3)) * 0.4,
          rng.normal(size=4)]),
        ("conv2d[reflect]", lambda x, w: proj((1, 2, 5, 5), 21)(
            ops.conv2d(x, w, padding=1, pad_mode="reflect")),
         [rng.normal(size=(1, 2, 5, 5)), rng.normal(size=(2, 2, 3, 3)) * 0.4]),
        ("conv2d[stride2]", lambda x, w: proj((1, 3, 3, 3), 22)(
            ops.conv2d(x, w, stride=2, padding=1)),
         [rng.normal(size=(1, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3)) * 0.4]),
        ("conv2d[depthwise]", lambda x, w: proj((1, 4, 5, 5), 23)(
            ops.conv2d(x, w, padding=1, groups=4)),
         [rng.normal(size=(1, 4, 5, 5)), rng.normal(size=(4, 1, 3, 3)) * 0.4]),
        ("pad2d[reflect]", lambda a: proj((2, 3, 7, 9), 24)(
            ops.pad2d(a, (1, 2), mode="reflect")),
         [rng.normal(size=(2, 3, 5, 5))]),
    ]
    return cases


def block_checks(seed=0):
    """(name, f, arrays, kwargs) for every network block, double precision."""
    from . import ops
    from .blocks import GatedConvBlock, SpatialAttention
    from .history import CausalHistoryBlock, HistoryAlign, HistoryRouter
    from .model import ModelConfig, RestorationModel

    rng = np.random.Generator(np.random.PCG64(seed + 50))
    cases = []

    ffn = GatedConvBlock(c=2, rng=rng).astype(np.float64)
    f, arrays = _module_case(ffn, lambda m, x: m(x), (2, 4, 4), seed=seed)
    cases.append(("block:gated_conv", f, arrays, {}))

    att = SpatialAttention(c=2, patch=2, rng=rng).astype(np.float64)
    f, arrays = _module_case(att, lambda m, x: m(x), (2, 4, 4), seed=seed + 1)
    cases.append(("block:spatial_attention", f, arrays, {}))

    align = HistoryAlign(c=2, patch=2, rng=rng).astype(np.float64)
    hist = rng.normal(size=(2, 2, 4, 4)) * 0.5

    def align_call(m, x):
        return m(x, Tensor(hist), k=3)

    f, arrays = _module_case(align, align_call, (2, 4, 4), seed=seed + 2)
    cases.append(("block:history_align", f, arrays, {}))

    router = HistoryRouter(c=2, rng=rng).astype(np.float64)
    stack = rng.normal(size=(3, 2, 4, 4)) * 0.5

    def router_call(m, x):
        return m(x, Tensor(stack))

    f, arrays = _module_case(router, router_call, (2, 4, 4), seed=seed + 3)
    cases.append(("block:history_router", f, arrays, {}))

    chm = CausalHistoryBlock(c=2, patch=2, tau=2, k=3, capacity=3,
                             rng=rng).astype(np.float64)
    past = [rng.normal(size=(2, 4, 4)) * 0.5 for _ in range(2)]

    def chm_call(m, x):
        queue = m.new_queue()
        for fr in past:
            queue.push(Tensor(fr))
        return m(x, queue)

    f, arrays = _module_case(chm, chm_call, (2, 4, 4), seed=seed + 4)
    cases.append(("block:causal_history", f, arrays, {}))

    cfg = ModelConfig(stages=3, base_width=4, in_channels=3, enc_blocks=1,
                      chm_blocks=1, tau=2, k=2, gamma=3, patch=(2, 2, 2),
                      precision="f64")
    model = RestorationModel(cfg, seed=seed + 5)

    def model_call(m, clip):
        return m.restore_clip(clip)

    wanted = ("head.w", "enc_stages.0.0.expand.w", "enc_stages.0.0.project.w",
              "downs.0.proj.w", "latent_blocks.0.align.wq.w",
              "latent_blocks.0.align.wv.w", "latent_blocks.0.align.alpha",
              "latent_blocks.0.input_transform.wo.w",
              "latent_blocks.0.router.wk.w", "latent_blocks.0.router.wo.w",
              "ups.0.proj.w", "skip_merge.0.w",
              "dec_stages.0.0.router.wv.w", "dec_stages.0.0.align.wo.w",
              "tail.w", "tail.b")
    f, arrays = _module_case(model, model_call, (2, 3, 16, 16), seed=seed + 6,
                             param_filter=lambda n: n in wanted)
    cases.append(("model:2x16x16_clip", f, arrays, {"max_coords": 4}))
    return cases


def run_gradient_suite(corrupt_op=None, seed=0):
    """Finite-difference checks over all ops and blocks.

    ``corrupt_op`` names one check whose tape gradient is deliberately
    offset, to demonstrate that failures are detected and reported.
    """
    results = []
    cases = [c if len(c) == 4 else (*c, {}) for c in op_checks(seed)]
    cases += block_checks(seed)
    for name, f, arrays, kwargs in cases:
        kwargs = dict(kwargs)
        kwargs.setdefault("max_coords", 60)
        results.append(check_gradient(name, f, arrays,
                                      corrupt=(name == corrupt_op), **kwargs))
    return results
