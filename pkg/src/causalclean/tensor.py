"""Dense tensors on numpy buffers with a reverse-mode tape.

A ``Tensor`` is an immutable value: a contiguous row-major float buffer plus an
optional handle onto the tape that produced it. A ``Tape`` is an ordered record
of executed operations (parents always precede children, since ops execute
eagerly), so backward is a single reverse sweep with one fixed accumulation
path — results are bit-reproducible run to run.

Tapes are single-writer: activate one with ``with Tape() as tape:``, run the
forward computation, then call ``tape.backward(loss)``. Parameters are plain
watched tensors; they get a fresh leaf node on whichever tape consumes them,
so the same parameter set can be reused across iterations.
"""

import numpy as np

FLOAT32 = np.float32
FLOAT64 = np.float64
_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

# Large finite stand-in for -inf: softmax underflows it to exactly 0 without
# ever producing NaN (exp(-1e30) == 0.0 in both precisions after the shift).
NEG_INF = {np.dtype(np.float32): np.float32(-1e9), np.dtype(np.float64): np.float64(-1e30)}

_checked = False


def set_checked(enabled):
    """Toggle checked mode: every op output is scanned for NaN/Inf."""
    global _checked
    previous = _checked
    _checked = bool(enabled)
    return previous


def is_checked():
    return _checked


class ShapeError(ValueError):
    """Operand shapes or extents violate an op's preconditions."""


class NumericalError(ArithmeticError):
    """Non-finite value produced while checked mode is on."""


class TapeError(RuntimeError):
    """Misuse of the tape (no active tape, non-scalar loss, foreign node)."""


def _as_dtype(dtype):
    dt = np.dtype(dtype)
    if dt not in _DTYPES:
        raise ShapeError(f"unsupported precision {dtype!r}; use float32 or float64")
    return dt


def _check_finite(data):
    if _checked and not np.all(np.isfinite(data)):
        raise NumericalError("non-finite value detected in checked mode")


class Node:
    """One recorded operation: parent handles plus its backward closure."""

    __slots__ = ("tape", "index", "name", "parents", "needed", "backward")

    def __init__(self, tape, index, name, parents, needed, backward):
        self.tape = tape
        self.index = index
        self.name = name
        self.parents = parents
        self.needed = needed
        self.backward = backward


class Tensor:
    """Immutable dense array, optionally attached to a tape node.

    ``watched`` marks a leaf whose gradient should be collected by
    ``Tape.backward`` (i.e. a trainable parameter or a probed input).
    """

    __slots__ = ("data", "node", "watched", "grad")

    def __init__(self, data, dtype=None, watched=False):
        if isinstance(data, Tensor):
            data = data.data
        arr = data if type(data) is np.ndarray else np.asarray(data)
        if dtype is not None:
            arr = arr.astype(_as_dtype(dtype), copy=False)
        elif arr.dtype not in _DTYPES:
            arr = arr.astype(np.float64 if arr.dtype == np.float64 else np.float32)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.node = None
        self.watched = bool(watched)
        self.grad = None
        _check_finite(self.data)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        """Same buffer, no tape attachment."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.node = None
        out.watched = False
        out.grad = None
        return out

    def copy(self, watched=None):
        out = Tensor(self.data.copy())
        out.watched = self.watched if watched is None else bool(watched)
        return out

    def __repr__(self):
        tag = " watched" if self.watched else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{tag})"


class Tape:
    """Ordered record of ops; gradient storage is keyed by node index."""

    _active = None

    def __init__(self):
        self.nodes = []
        self._leaves = {}  # node index -> leaf Tensor

    # -- activation ----------------------------------------------------
    def __enter__(self):
        if Tape._active is not None:
            raise TapeError("a tape is already active; tapes do not nest")
        Tape._active = self
        return self

    def __exit__(self, exc_type, exc, tb):
        Tape._active = None
        return False

    @staticmethod
    def current():
        return Tape._active

    # -- recording -----------------------------------------------------
    def _new_node(self, name, parents, needed, backward):
        node = Node(self, len(self.nodes), name, parents, needed, backward)
        self.nodes.append(node)
        return node

    def leaf(self, tensor):
        node = self._new_node("leaf", (), (), None)
        self._leaves[node.index] = tensor
        return node

    # -- backward ------------------------------------------------------
    def backward(self, loss):
        """Reverse sweep from a scalar loss; returns {leaf Tensor: grad}.

        Also stores each leaf's gradient on ``tensor.grad``. Gradients have
        the same shape and dtype as their leaves.
        """
        if not isinstance(loss, Tensor) or loss.node is None or loss.node.tape is not self:
            raise TapeError("loss is not a tensor recorded on this tape")
        if loss.size != 1:
            raise TapeError(f"loss must be scalar, got shape {loss.shape}")
        grads = [None] * len(self.nodes)
        grads[loss.node.index] = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = grads[node.index]
            if g is None or node.backward is None:
                continue
            parent_grads = node.backward(g, node.needed)
            for parent, pg in zip(node.parents, parent_grads):
                if parent is None or pg is None:
                    continue
                if grads[parent.index] is None:
                    grads[parent.index] = pg
                else:
                    grads[parent.index] = grads[parent.index] + pg
            grads[node.index] = None  # release as we go
        result = {}
        for index, leaf in self._leaves.items():
            g = grads[index]
            if g is None:
                g = np.zeros_like(leaf.data)
            g = np.ascontiguousarray(g, dtype=leaf.dtype)
            if g.shape != leaf.data.shape:
                raise TapeError(
                    f"gradient shape {g.shape} != leaf shape {leaf.data.shape}")
            leaf.grad = g
            result[leaf] = g
        return result


def node_for(tensor, tape):
    """Node of ``tensor`` on ``tape``; registers watched leaves on demand."""
    if tape is None:
        return None
    node = tensor.node
    if node is not None and node.tape is tape:
        return node
    if tensor.watched:
        tensor.node = tape.leaf(tensor)
        return tensor.node
    return None


def record(name, out_data, parents, backward):
    """Wrap an op result, recording it if any parent is tracked.

    ``backward(g, needed)`` must return per-parent gradient arrays (None for
    parents whose ``needed`` flag is False).
    """
    _check_finite(out_data)
    tape = Tape.current()
    if tape is None:
        return Tensor(out_data)
    pnodes = tuple(node_for(p, tape) for p in parents)
    if not any(n is not None for n in pnodes):
        return Tensor(out_data)
    needed = tuple(n is not None for n in pnodes)
    out = Tensor(out_data)
    out.node = tape._new_node(name, pnodes, needed, backward)
    return out


# -- creation ----------------------------------------------------------


def _check_extents(shape):
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise ShapeError(f"extents must be positive, got {shape}")
    return shape


def zeros(shape, dtype=FLOAT32, watched=False):
    return Tensor(np.zeros(_check_extents(shape), dtype=_as_dtype(dtype)), watched=watched)


def full(shape, value, dtype=FLOAT32, watched=False):
    return Tensor(np.full(_check_extents(shape), value, dtype=_as_dtype(dtype)), watched=watched)


def uniform(shape, seed, low=0.0, high=1.0, dtype=FLOAT32, watched=False):
    """Deterministic uniform fill: identical buffers for identical seeds."""
    shape = _check_extents(shape)
    rng = np.random.Generator(np.random.PCG64(seed))
    data = rng.uniform(low, high, size=shape).astype(_as_dtype(dtype))
    return Tensor(data, watched=watched)


def as_tensor(value, dtype=None):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value), dtype=dtype)
