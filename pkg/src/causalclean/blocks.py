"""Network building blocks: patch attention and gated convolutional FFN.

Feature maps are channels-first [c, h, w]; an optional leading axis batches
frames ([t, c, h, w]). All blocks are pure functions of (input, parameters)
and preserve the [c, h, w] shape of their stage.
"""

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor


class Module:
    """Parameter container. Watched tensors and child modules are discovered
    by attribute scan in assignment order, so naming is deterministic."""

    def named_params(self, prefix=""):
        out = {}
        for name, value in vars(self).items():
            self._walk(value, prefix + name, out)
        return out

    @staticmethod
    def _walk(value, path, out):
        if isinstance(value, Tensor):
            if value.watched:
                out[path] = value
        elif isinstance(value, Module):
            out.update(value.named_params(path + "."))
        elif isinstance(value, (list, tuple)):
            for i, item in enumerate(value):
                Module._walk(item, f"{path}.{i}", out)

    def load_params(self, values, prefix=""):
        """Overwrite parameter buffers in place from a {name: ndarray} map."""
        for name, tensor in self.named_params(prefix).items():
            if name not in values:
                raise KeyError(f"missing parameter {name!r}")
            arr = np.asarray(values[name])
            if arr.shape != tensor.shape:
                raise ShapeError(f"{name}: shape {arr.shape} != {tensor.shape}")
            tensor.data = np.ascontiguousarray(arr.astype(tensor.dtype, copy=False))
            tensor.node = None

    def astype(self, dtype):
        """Convert every parameter buffer in place (f32 <-> f64)."""
        for tensor in self.named_params().values():
            tensor.data = tensor.data.astype(dtype)
            tensor.node = None
        return self


def init_uniform(rng, shape, fan_in, dtype=np.float32):
    # variance-preserving uniform: Var(out) == Var(in) for a dense layer
    bound = np.sqrt(3.0 / fan_in)
    data = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return Tensor(data, watched=True)


def init_zeros(shape, dtype=np.float32):
    return Tensor(np.zeros(shape, dtype=dtype), watched=True)


def init_scalar(value, dtype=np.float32):
    return Tensor(np.full((1,), value, dtype=dtype), watched=True)


# -- patch grids ---------------------------------------------------------


class PatchGrid:
    """Non-overlapping (p1 x p2) patch layout over a [c, h, w] feature map."""

    def __init__(self, c, h, w, p1, p2):
        if h % p1 or w % p2:
            raise ShapeError(f"extents {(h, w)} not divisible by patch {(p1, p2)}")
        self.c, self.h, self.w = c, h, w
        self.p1, self.p2 = p1, p2
        self.n_h, self.n_w = h // p1, w // p2
        self.d = c * p1 * p2

    @property
    def n(self):
        return self.n_h * self.n_w

    @classmethod
    def fit(cls, shape, p1, p2):
        c, h, w = shape[-3:]
        return cls(c, h, w, p1, p2)


def pad_to_multiple(x, p1, p2):
    """Reflect-pad trailing extents up to multiples of (p1, p2).

    Returns (padded, original (h, w)). Padding goes on the bottom/right so a
    plain crop inverts it.
    """
    h, w = x.shape[-2:]
    rh = (-h) % p1
    rw = (-w) % p2
    if rh == 0 and rw == 0:
        return x, (h, w)
    # pad2d pads symmetrically; pad one-sided via concat of reflected slices
    out = x
    if rh:
        tail = ops.narrow(out, out.ndim - 2, h - rh - 1, rh)
        flipped = ops.concat([ops.narrow(tail, out.ndim - 2, rh - 1 - i, 1)
                              for i in range(rh)], axis=out.ndim - 2)
        out = ops.concat([out, flipped], axis=out.ndim - 2)
    if rw:
        w0 = out.shape[-1]
        tail = ops.narrow(out, out.ndim - 1, w0 - rw - 1, rw)
        flipped = ops.concat([ops.narrow(tail, out.ndim - 1, rw - 1 - i, 1)
                              for i in range(rw)], axis=out.ndim - 1)
        out = ops.concat([out, flipped], axis=out.ndim - 1)
    return out, (h, w)


def crop_to(x, h, w):
    if x.shape[-2] != h:
        x = ops.narrow(x, x.ndim - 2, 0, h)
    if x.shape[-1] != w:
        x = ops.narrow(x, x.ndim - 1, 0, w)
    return x


def patchify(x, grid):
    """[*, c, h, w] -> [*, n_h*n_w, d] with row-major patch order.

    Each patch flattens channel-major: d = (c, p1, p2) order.
    """
    lead = x.shape[:-3]
    c, h, w = x.shape[-3:]
    if (c, h, w) != (grid.c, grid.h, grid.w):
        raise ShapeError(f"feature {(c, h, w)} does not match grid "
                         f"{(grid.c, grid.h, grid.w)}")
    k = len(lead)
    x = ops.reshape(x, lead + (c, grid.n_h, grid.p1, grid.n_w, grid.p2))
    perm = tuple(range(k)) + (k + 1, k + 3, k, k + 2, k + 4)
    x = ops.transpose(x, perm)
    return ops.reshape(x, lead + (grid.n, grid.d))


def unpatchify(x, grid):
    """Exact inverse of :func:`patchify`."""
    lead = x.shape[:-2]
    if x.shape[-2:] != (grid.n, grid.d):
        raise ShapeError(f"patched shape {x.shape[-2:]} does not match grid")
    k = len(lead)
    x = ops.reshape(x, lead + (grid.n_h, grid.n_w, grid.c, grid.p1, grid.p2))
    perm = tuple(range(k)) + (k + 2, k, k + 3, k + 1, k + 4)
    x = ops.transpose(x, perm)
    return ops.reshape(x, lead + (grid.c, grid.h, grid.w))


# -- primitive layers ----------------------------------------------------


class ChannelLinear(Module):
    """Per-pixel channel mixing: w[c_out, c_in] applied at every position."""

    def __init__(self, c_in, c_out, rng, bias=False, zero_init=False):
        self.w = init_zeros((c_out, c_in)) if zero_init else \
            init_uniform(rng, (c_out, c_in), fan_in=c_in)
        self.b = init_zeros((c_out,)) if bias else None
        self.c_in, self.c_out = c_in, c_out

    def __call__(self, x):
        lead = x.shape[:-3]
        c, h, w = x.shape[-3:]
        flat = ops.reshape(x, lead + (c, h * w))
        out = ops.matmul(self.w, flat)
        if self.b is not None:
            out = ops.add(out, ops.reshape(self.b, (self.c_out, 1)))
        return ops.reshape(out, lead + (self.c_out, h, w))


class Conv(Module):
    """Thin wrapper over ops.conv2d accepting [c,h,w] or [n,c,h,w] input."""

    def __init__(self, c_in, c_out, kernel, rng, stride=1, padding=0, groups=1,
                 bias=True, zero_init=False):
        shape = (c_out, c_in // groups, kernel, kernel)
        fan_in = (c_in // groups) * kernel * kernel
        self.w = init_zeros(shape) if zero_init else init_uniform(rng, shape, fan_in)
        self.b = init_zeros((c_out,)) if bias else None
        self.stride, self.padding, self.groups = stride, padding, groups

    def __call__(self, x):
        squeeze = x.ndim == 3
        if squeeze:
            x = ops.reshape(x, (1,) + x.shape)
        out = ops.conv2d(x, self.w, self.b, stride=self.stride,
                         padding=self.padding, groups=self.groups)
        if squeeze:
            out = ops.reshape(out, out.shape[1:])
        return out


class ChannelNorm(Module):
    """LayerNorm over the channel axis of [*, c, h, w]."""

    def __init__(self, c):
        self.gain = Tensor(np.ones(c, dtype=np.float32), watched=True)
        self.bias = init_zeros((c,))
        self.c = c

    def __call__(self, x):
        return ops.layer_norm(x, self.gain, self.bias, axis=x.ndim - 3)


def qkv_project(x, grid, wq, wk, wv):
    """Patched projections of a feature map: three [*, n, d] tensors.

    Projections are per-pixel channel mixes applied before the patch
    rearrangement (they commute with it exactly).
    """
    return (patchify(wq(x), grid), patchify(wk(x), grid), patchify(wv(x), grid))


def split_heads(x, heads):
    """[*, n, d] -> [*, heads, n, d/heads]."""
    lead = x.shape[:-2]
    n, d = x.shape[-2:]
    if d % heads:
        raise ShapeError(f"patch dim {d} not divisible by {heads} heads")
    k = len(lead)
    x = ops.reshape(x, lead + (n, heads, d // heads))
    return ops.transpose(x, tuple(range(k)) + (k + 1, k, k + 2))


def merge_heads(x):
    """Inverse of :func:`split_heads`."""
    lead = x.shape[:-3]
    heads, n, dh = x.shape[-3:]
    k = len(lead)
    x = ops.transpose(x, tuple(range(k)) + (k + 1, k, k + 2))
    return ops.reshape(x, lead + (n, heads * dh))


class SpatialAttention(Module):
    """Single-frame self-attention over spatial patches (dense softmax).

    This is the input transformation applied to the current frame before its
    slot is concatenated with the aligned history. No residual: the caller
    decides what happens to the output.
    """

    def __init__(self, c, patch, rng, heads=1):
        self.wq = ChannelLinear(c, c, rng)
        self.wk = ChannelLinear(c, c, rng)
        self.wv = ChannelLinear(c, c, rng)
        self.wo = ChannelLinear(c, c, rng)
        self.c, self.patch, self.heads = c, patch, heads
        d = c * patch * patch  # patch dim is resolution-independent
        self.alpha = init_scalar(1.0 / np.sqrt(d / heads))

    def __call__(self, f):
        padded, (h, w) = pad_to_multiple(f, self.patch, self.patch)
        grid = PatchGrid.fit(padded.shape, self.patch, self.patch)
        q, k, v = qkv_project(padded, grid, self.wq, self.wk, self.wv)
        q, k, v = (split_heads(t, self.heads) for t in (q, k, v))
        scores = ops.mul(ops.matmul(q, ops.transpose(k, swap_last_axes(k.ndim))), self.alpha)
        attn = ops.softmax(scores, axis=-1)
        out = merge_heads(ops.matmul(attn, v))
        return crop_to(self.wo(unpatchify(out, grid)), h, w)


def swap_last_axes(ndim):
    perm = list(range(ndim))
    perm[-1], perm[-2] = perm[-2], perm[-1]
    return tuple(perm)


class GatedConvBlock(Module):
    """History-free residual block: norm, 1x1 expand, 3x3 depthwise, gate,
    zero-initialized 1x1 back. With the final projection at zero the block is
    an exact identity."""

    def __init__(self, c, rng, expansion=2):
        hidden = c * expansion
        self.norm = ChannelNorm(c)
        self.expand = Conv(c, 2 * hidden, 1, rng)
        self.depthwise = Conv(2 * hidden, 2 * hidden, 3, rng, padding=1,
                              groups=2 * hidden)
        self.project = Conv(hidden, c, 1, rng, zero_init=True)

    def __call__(self, x):
        y = self.norm(x)
        y = self.expand(y)
        y = self.depthwise(y)
        y = ops.gate(y, axis=y.ndim - 3)
        y = self.project(y)
        return ops.add(x, y)
