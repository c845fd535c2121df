"""Differentiable array operations on the tape.

Every public op takes/returns :class:`~causalclean.tensor.Tensor` and records
a backward closure when a tape is active. Buffers are numpy; convolution runs
through im2col + batched matmul with a transposed-convolution backward, so the
heavy paths stay in BLAS.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .tensor import NEG_INF, ShapeError, Tensor, as_tensor, record

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _same_dtype(*tensors):
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise ShapeError(f"mixed precisions {dt} and {t.dtype}")
    return dt


# -- elementwise -------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_dtype(a, b)
    try:
        out = a.data + b.data
    except ValueError as e:
        raise ShapeError(str(e)) from None
    ash, bsh = a.shape, b.shape

    def backward(g, needed):
        return (_unbroadcast(g, ash) if needed[0] else None,
                _unbroadcast(g, bsh) if needed[1] else None)

    return record("add", out, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_dtype(a, b)
    try:
        out = a.data - b.data
    except ValueError as e:
        raise ShapeError(str(e)) from None
    ash, bsh = a.shape, b.shape

    def backward(g, needed):
        return (_unbroadcast(g, ash) if needed[0] else None,
                _unbroadcast(-g, bsh) if needed[1] else None)

    return record("sub", out, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_dtype(a, b)
    try:
        out = a.data * b.data
    except ValueError as e:
        raise ShapeError(str(e)) from None
    ad, bd = a.data, b.data

    def backward(g, needed):
        return (_unbroadcast(g * bd, ad.shape) if needed[0] else None,
                _unbroadcast(g * ad, bd.shape) if needed[1] else None)

    return record("mul", out, (a, b), backward)


def scale(x, s):
    """Multiply by a python scalar (not a tape value)."""
    x = as_tensor(x)
    s = float(s)
    out = x.data * x.dtype.type(s)

    def backward(g, needed):
        return (g * s,)

    return record("scale", out, (x,), backward)


def neg(x):
    return scale(x, -1.0)


def gelu(x):
    """Exact (erf-based) GELU."""
    x = as_tensor(x)
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = (xd * cdf).astype(x.dtype, copy=False)

    def backward(g, needed):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT2PI
        return (g * (cdf + xd * pdf),)

    return record("gelu", out, (x,), backward)


def gate(x, axis):
    """Simple gate: split ``axis`` in two halves and multiply them."""
    x = as_tensor(x)
    n = x.shape[axis]
    if n % 2 != 0:
        raise ShapeError(f"gate needs an even extent on axis {axis}, got {n}")
    h1, h2 = np.split(x.data, 2, axis=axis)
    out = h1 * h2

    def backward(g, needed):
        return (np.concatenate([g * h2, g * h1], axis=axis),)

    return record("gate", out, (x,), backward)


def absolute(x):
    x = as_tensor(x)
    xd = x.data

    def backward(g, needed):
        return (g * np.sign(xd),)

    return record("abs", np.abs(xd), (x,), backward)


# -- reductions --------------------------------------------------------


def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)
    shape, dt = x.shape, x.dtype

    def backward(g, needed):
        gb = g
        if axis is not None and not keepdims:
            gb = np.expand_dims(gb, axis)
        return (np.broadcast_to(gb, shape).astype(dt, copy=False),)

    return record("sum", np.asarray(out), (x,), backward)


def tmean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    count = x.size if axis is None else (
        np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(tsum(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


# -- shape manipulation ------------------------------------------------


def reshape(x, shape):
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")
    old = x.shape

    def backward(g, needed):
        return (g.reshape(old),)

    return record("reshape", x.data.reshape(shape), (x,), backward)


def transpose(x, perm):
    x = as_tensor(x)
    perm = tuple(int(p) for p in perm)
    if sorted(perm) != list(range(x.ndim)):
        raise ShapeError(f"{perm} is not a permutation of {x.ndim} axes")
    inv = np.argsort(perm)

    def backward(g, needed):
        return (g.transpose(inv),)

    return record("transpose", np.ascontiguousarray(x.data.transpose(perm)), (x,), backward)


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    _same_dtype(*tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(str(e)) from None
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g, needed):
        pieces = np.split(g, splits, axis=axis)
        return [p if need else None for p, need in zip(pieces, needed)]

    return record("concat", out, tuple(tensors), backward)


def stack(tensors, axis=0):
    """Stack along a new axis (concat of unsqueezed operands)."""
    tensors = [as_tensor(t) for t in tensors]
    shaped = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(shaped, axis)


def narrow(x, axis, start, length):
    """Contiguous slice [start, start+length) along one axis."""
    x = as_tensor(x)
    if start < 0 or start + length > x.shape[axis]:
        raise ShapeError(f"slice [{start}:{start + length}] exceeds extent {x.shape[axis]}")
    index = (slice(None),) * axis + (slice(start, start + length),)
    shape = x.shape

    def backward(g, needed):
        full = np.zeros(shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return record("narrow", np.ascontiguousarray(x.data[index]), (x,), backward)


def _raw_unshuffle(arr, r):
    c, h, w = arr.shape[-3:]
    lead = arr.shape[:-3]
    arr = arr.reshape(lead + (c, h // r, r, w // r, r))
    arr = np.moveaxis(arr, (-3, -1), (-4, -3))
    return np.ascontiguousarray(arr.reshape(lead + (c * r * r, h // r, w // r)))


def _raw_shuffle(arr, r):
    c, h, w = arr.shape[-3:]
    lead = arr.shape[:-3]
    arr = arr.reshape(lead + (c // (r * r), r, r, h, w))
    arr = np.moveaxis(arr, (-4, -3), (-3, -1))
    return np.ascontiguousarray(arr.reshape(lead + (c // (r * r), h * r, w * r)))


def pixel_unshuffle(x, r):
    """[..., c, h, w] -> [..., c*r*r, h/r, w/r]; exact inverse of pixel_shuffle."""
    x = as_tensor(x)
    c, h, w = x.shape[-3:]
    if h % r or w % r:
        raise ShapeError(f"spatial extents {(h, w)} not divisible by {r}")

    def backward(g, needed):
        return (_raw_shuffle(g, r),)

    return record("pixel_unshuffle", _raw_unshuffle(x.data, r), (x,), backward)


def pixel_shuffle(x, r):
    """[..., c*r*r, h, w] -> [..., c, h*r, w*r]."""
    x = as_tensor(x)
    c = x.shape[-3]
    if c % (r * r):
        raise ShapeError(f"channel extent {c} not divisible by {r * r}")

    def backward(g, needed):
        return (_raw_unshuffle(g, r),)

    return record("pixel_shuffle", _raw_shuffle(x.data, r), (x,), backward)


# -- linear algebra ----------------------------------------------------


def matmul(a, b):
    """Batched matrix product; leading dims broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    _same_dtype(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must have at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner extents differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as e:
        raise ShapeError(str(e)) from None
    ad, bd = a.data, b.data

    def backward(g, needed):
        ga = gb = None
        if needed[0]:
            ga = _unbroadcast(np.matmul(g, bd.swapaxes(-1, -2)), ad.shape)
        if needed[1]:
            gb = _unbroadcast(np.matmul(ad.swapaxes(-1, -2), g), bd.shape)
        return (ga, gb)

    return record("matmul", out, (a, b), backward)


def l2_normalize(x, axis, eps=1e-12):
    """Scale vectors along ``axis`` to unit Euclidean norm."""
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True) + x.dtype.type(eps))
    y = x.data / norm

    def backward(g, needed):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - y * dot) / norm,)

    return record("l2_normalize", y, (x,), backward)


def softmax(x, axis):
    """Shift-invariant softmax along ``axis`` (max subtracted internally)."""
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g, needed):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return record("softmax", y, (x,), backward)


def topk_mask(scores, k, axis):
    """Keep the k largest entries along ``axis``; the rest become NEG_INF.

    Ties break toward the lowest index. Gradient flows only through the
    surviving entries. With k equal to the full extent the input is returned
    value-for-value, so softmax(topk_mask(x, full)) == softmax(x) exactly.
    """
    scores = as_tensor(scores)
    extent = scores.shape[axis]
    if not 1 <= k <= extent:
        raise ShapeError(f"k={k} outside [1, {extent}]")
    # Stable sort of the negated scores: equal values keep ascending index
    # order, which is exactly the lowest-index tie rule.
    order = np.argsort(-scores.data, axis=axis, kind="stable")
    top = np.take(order, np.arange(k), axis=axis)
    keep = np.zeros(scores.shape, dtype=bool)
    np.put_along_axis(keep, top, True, axis=axis)
    out = np.where(keep, scores.data, NEG_INF[scores.dtype])

    def backward(g, needed):
        return (np.where(keep, g, 0.0),)

    return record("topk_mask", out, (scores,), backward)


def layer_norm(x, gain, bias, axis, eps=1e-6):
    """Normalize to zero mean / unit variance along ``axis``, then affine.

    ``gain`` and ``bias`` are 1-D with the extent of ``axis``.
    """
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    _same_dtype(x, gain, bias)
    extent = x.shape[axis]
    if gain.shape != (extent,) or bias.shape != (extent,):
        raise ShapeError(f"gain/bias must have shape ({extent},)")
    bshape = [1] * x.ndim
    bshape[axis] = extent
    gb = gain.data.reshape(bshape)
    bb = bias.data.reshape(bshape)
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gb + bb
    reduce_axes = tuple(i for i in range(x.ndim) if i != (axis % x.ndim))

    def backward(g, needed):
        gx = ggain = gbias = None
        if needed[0]:
            dxhat = g * gb
            m1 = dxhat.mean(axis=axis, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=axis, keepdims=True)
            gx = inv * (dxhat - m1 - xhat * m2)
        if needed[1]:
            ggain = (g * xhat).sum(axis=reduce_axes)
        if needed[2]:
            gbias = g.sum(axis=reduce_axes)
        return (gx, ggain, gbias)

    return record("layer_norm", out, (x, gain, bias), backward)


# -- padding and convolution -------------------------------------------


def pad2d(x, padding, mode="zeros"):
    """Pad the two trailing axes by ``padding`` on every side."""
    x = as_tensor(x)
    ph, pw = (padding, padding) if np.isscalar(padding) else padding
    ph, pw = int(ph), int(pw)
    if ph < 0 or pw < 0:
        raise ShapeError("padding must be non-negative")
    if ph == 0 and pw == 0:
        return x
    h, w = x.shape[-2:]
    spec = [(0, 0)] * (x.ndim - 2) + [(ph, ph), (pw, pw)]
    if mode == "zeros":
        out = np.pad(x.data, spec)

        def backward(g, needed):
            sl = (Ellipsis, slice(ph, ph + h), slice(pw, pw + w))
            return (np.ascontiguousarray(g[sl]),)

    elif mode == "reflect":
        if ph >= h or pw >= w:
            raise ShapeError(f"reflect padding ({ph},{pw}) too large for {(h, w)}")
        out = np.pad(x.data, spec, mode="reflect")
        # Source-index maps double as the backward scatter targets.
        rows = np.pad(np.arange(h), (ph, ph), mode="reflect")
        cols = np.pad(np.arange(w), (pw, pw), mode="reflect")
        flat = (rows[:, None] * w + cols[None, :]).ravel()

        def backward(g, needed):
            lead = g.shape[:-2]
            g2 = g.reshape(-1, (h + 2 * ph) * (w + 2 * pw)).T
            dx = np.zeros((h * w, g2.shape[1]), dtype=g.dtype)
            np.add.at(dx, flat, g2)
            return (np.ascontiguousarray(dx.T.reshape(lead + (h, w))),)

    else:
        raise ShapeError(f"unknown padding mode {mode!r}")
    return record(f"pad2d[{mode}]", out, (x,), backward)


def _im2col(x, kh, kw, stride, groups):
    """[n,ci,h,w] -> contiguous [n, g, cig*kh*kw, oh*ow]."""
    n, ci, h, w = x.shape
    cig = ci // groups
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    oh, ow = win.shape[2], win.shape[3]
    win = win.reshape(n, groups, cig, oh, ow, kh, kw)
    cols = win.transpose(0, 1, 2, 5, 6, 3, 4).reshape(n, groups, cig * kh * kw, oh * ow)
    return np.ascontiguousarray(cols), oh, ow


def _raw_conv(x, w, stride, groups):
    """Raw valid cross-correlation on ndarrays -> [n, co, oh, ow]."""
    n = x.shape[0]
    co, cig, kh, kw = w.shape
    cols, oh, ow = _im2col(x, kh, kw, stride, groups)
    wmat = w.reshape(groups, co // groups, cig * kh * kw)
    out = np.matmul(wmat, cols)  # [n, g, cog, oh*ow]
    return out.reshape(n, co, oh, ow), cols


def _pointwise_conv(x, w, b):
    """1x1 / stride 1 / ungrouped conv == channel matmul; no im2col."""
    n, ci, h, wd = x.shape
    co = w.shape[0]
    w2 = w.data.reshape(co, ci)
    x3 = x.data.reshape(n, ci, h * wd)
    out = np.matmul(w2, x3)
    if b is not None:
        out = out + b.data.reshape(1, co, 1)
    out = out.reshape(n, co, h, wd)
    xd = x.data

    def backward(g, needed):
        g3 = g.reshape(n, co, h * wd)
        gx = gw = gb = None
        if needed[0]:
            gx = np.matmul(w2.T, g3).reshape(n, ci, h, wd)
        if needed[1]:
            gw = np.matmul(g3, xd.reshape(n, ci, h * wd).swapaxes(-1, -2))
            gw = gw.sum(axis=0).reshape(co, ci, 1, 1)
        if len(needed) > 2 and needed[2]:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return record("conv2d[1x1]", out, parents, backward)


def _depthwise_conv(x, w, b):
    """groups == c_in == c_out, stride 1: kh*kw shifted multiply-adds."""
    n, c, h, wd = x.shape
    kh, kw = w.shape[2], w.shape[3]
    oh, ow = h - kh + 1, wd - kw + 1
    xd, wdata = x.data, w.data
    out = np.zeros((n, c, oh, ow), dtype=x.dtype)
    for u in range(kh):
        for v in range(kw):
            out += wdata[:, 0, u, v][None, :, None, None] * xd[:, :, u:u + oh, v:v + ow]
    if b is not None:
        out = out + b.data.reshape(1, c, 1, 1)

    def backward(g, needed):
        gx = gw = gb = None
        if needed[0]:
            gx = np.zeros((n, c, h, wd), dtype=g.dtype)
            for u in range(kh):
                for v in range(kw):
                    gx[:, :, u:u + oh, v:v + ow] += \
                        wdata[:, 0, u, v][None, :, None, None] * g
        if needed[1]:
            gw = np.empty((c, 1, kh, kw), dtype=g.dtype)
            for u in range(kh):
                for v in range(kw):
                    gw[:, 0, u, v] = (xd[:, :, u:u + oh, v:v + ow] * g).sum(axis=(0, 2, 3))
        if len(needed) > 2 and needed[2]:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return record("conv2d[dw]", out, parents, backward)


def conv2d(x, w, b=None, stride=1, padding=0, groups=1, pad_mode="zeros"):
    """2-D cross-correlation over [n, c_in, h, w].

    ``w`` is [c_out, c_in/groups, kh, kw]; ``b`` is [c_out] or None. Gradients
    are defined for x, w and b. The input gradient is computed as a valid
    cross-correlation with the spatially flipped, channel-swapped kernel
    (zero-dilated for stride > 1), never by scatter-add. Pointwise and
    depthwise layers take cheaper direct paths with identical semantics.
    """
    x, w = as_tensor(x), as_tensor(w)
    operands = [x, w]
    if b is not None:
        b = as_tensor(b)
        operands.append(b)
    _same_dtype(*operands)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d wants 4-D input/kernel, got {x.shape}, {w.shape}")
    if padding:
        x = pad2d(x, padding, mode=pad_mode)
    n, ci, h, wd = x.shape
    co, cig, kh, kw = w.shape
    if ci % groups or co % groups or cig != ci // groups:
        raise ShapeError(f"channels {ci}->{co} incompatible with groups={groups}")
    if b is not None and b.shape != (co,):
        raise ShapeError(f"bias must have shape ({co},)")
    if kh > h or kw > wd:
        raise ShapeError(f"kernel {(kh, kw)} larger than padded input {(h, wd)}")
    stride = int(stride)
    if stride == 1 and groups == 1 and kh == 1 and kw == 1:
        return _pointwise_conv(x, w, b)
    if stride == 1 and groups == ci == co:
        return _depthwise_conv(x, w, b)
    out, _ = _raw_conv(x.data, w.data, stride, groups)
    if b is not None:
        out = out + b.data.reshape(1, co, 1, 1)
    oh, ow = out.shape[2], out.shape[3]
    xd, wdata = x.data, w.data

    def backward(g, needed):
        gx = gw = gb = None
        if needed[1]:
            cols, _, _ = _im2col(xd, kh, kw, stride, groups)
            g2 = g.reshape(n, groups, co // groups, oh * ow)
            gw = np.matmul(g2, cols.swapaxes(-1, -2)).sum(axis=0).reshape(w.shape)
        if needed[0]:
            gu = g
            if stride > 1:
                gu = np.zeros((n, co, (oh - 1) * stride + 1, (ow - 1) * stride + 1),
                              dtype=g.dtype)
                gu[:, :, ::stride, ::stride] = g
            gp = np.pad(gu, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            wk = wdata.reshape(groups, co // groups, cig, kh, kw)
            wk = wk.transpose(0, 2, 1, 3, 4)[:, :, :, ::-1, ::-1]
            wk = np.ascontiguousarray(wk.reshape(ci, co // groups, kh, kw))
            gx, _ = _raw_conv(gp, wk, 1, groups)
            rh, rw = h - gx.shape[2], wd - gx.shape[3]
            if rh or rw:  # rows/cols skipped by the stride never contribute
                gx = np.pad(gx, ((0, 0), (0, 0), (0, rh), (0, rw)))
        if len(needed) > 2 and needed[2]:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return record("conv2d", out, parents, backward)


# -- operator sugar ----------------------------------------------------


def _install_operators():
    Tensor.__add__ = lambda self, other: add(self, other)
    Tensor.__radd__ = lambda self, other: add(other, self)
    Tensor.__sub__ = lambda self, other: sub(self, other)
    Tensor.__rsub__ = lambda self, other: sub(other, self)
    Tensor.__neg__ = lambda self: neg(self)
    Tensor.__matmul__ = lambda self, other: matmul(self, other)

    def _mul(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    Tensor.__mul__ = _mul
    Tensor.__rmul__ = _mul


_install_operators()
