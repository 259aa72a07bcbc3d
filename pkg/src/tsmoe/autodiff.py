"""Reverse-mode automatic differentiation over 64-bit numpy arrays.

Every primitive applied to tensors that require gradients is appended to
the active :class:`Tape`; ``Tape.backward`` replays the records strictly in
reverse order of recording. All values are float64. A tape is single
threaded and never shared between threads; tensors may be read concurrently
once recorded.
"""

from __future__ import annotations

import contextlib

import numpy as np

_TAPE_STACK: list["Tape | None"] = []


def active_tape():
    """The innermost active tape, or None when recording is disabled."""
    return _TAPE_STACK[-1] if _TAPE_STACK else None


@contextlib.contextmanager
def no_grad():
    """Disable recording inside the block (forward values still computed)."""
    _TAPE_STACK.append(None)
    try:
        yield
    finally:
        _TAPE_STACK.pop()


class Tensor:
    """A dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_err()

    def detach(self) -> "Tensor":
        """A constant view of the same values (no gradient tracking)."""
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    # operator sugar; scalars and arrays are wrapped as constants
    def __add__(self, other):
        return add(self, as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, as_tensor(other))

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))


def _scalar_err():
    raise ValueError("item() requires a single-element tensor")


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class _Record:
    """One recorded primitive: output, inputs, and the backward rule."""

    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward

    def run_backward(self):
        g = self.out.grad
        if g is None:
            return
        for tensor, piece in zip(self.inputs, self.backward(g)):
            if piece is None or not tensor.requires_grad:
                continue
            tensor.grad = piece if tensor.grad is None else tensor.grad + piece


class Tape:
    """Ordered record of primitives plus a seedable noise generator.

    Replaying backward visits records in strict reverse order of recording.
    Two forward passes under tapes built with the same seed and inputs are
    bit-identical.
    """

    def __init__(self, seed: int | None = None):
        self.records: list[_Record] = []
        self.rng = np.random.default_rng(seed)

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self.records)

    def backward(self, loss: Tensor):
        if loss.data.size != 1:
            raise ValueError("backward expects a scalar loss")
        loss.grad = np.ones_like(loss.data)
        for record in reversed(self.records):
            record.run_backward()


def _emit(data, inputs, backward) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.records.append(_Record(out, inputs, backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    return _emit(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _emit(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _emit(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data
    return _emit(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * out / b.data, b.data.shape),
        ),
    )


def neg(a: Tensor) -> Tensor:
    return _emit(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    return _emit(
        a.data**exponent,
        (a,),
        lambda g: (g * exponent * a.data ** (exponent - 1.0),),
    )


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _emit(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _emit(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    return power(a, 0.5)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _emit(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    # 0.5*(1+tanh(x/2)) is stable for large |x|
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _emit(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0
    return _emit(np.where(keep, a.data, 0.0), (a,), lambda g: (g * keep,))


def softplus(a: Tensor) -> Tensor:
    out = np.logaddexp(0.0, a.data)
    return _emit(out, (a,), lambda g: (g * 0.5 * (1.0 + np.tanh(0.5 * a.data)),))


def absolute(a: Tensor) -> Tensor:
    return _emit(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


# ---------------------------------------------------------------------------
# reductions and shape ops


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return _emit(out, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.data.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.data.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    inverse = np.argsort(axes)
    return _emit(
        np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),)
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul requires operands with ndim >= 2")

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape))

    return _emit(np.matmul(a.data, b.data), (a, b), backward)


# ---------------------------------------------------------------------------
# structured primitives


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis``; entries at -inf map exactly to 0.

    Raises on rows whose entire support is -inf.
    """
    x = a.data
    if np.any(np.all(np.isneginf(x), axis=axis)):
        raise ValueError("empty support")
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _emit(out, (a,), backward)


def keep_topk(a: Tensor, k: int, axis: int = -1) -> Tensor:
    """Retain the k largest entries along ``axis``; all others become -inf.

    Ties break toward the lowest index. Gradient flows only through the
    retained entries.
    """
    mask = topk_mask(a.data, k, axis=axis)
    out = np.where(mask, a.data, -np.inf)
    return _emit(out, (a,), lambda g: (g * mask,))


def topk_mask(x: np.ndarray, k: int, axis: int = -1) -> np.ndarray:
    """Boolean mask of the k largest entries along ``axis``, ties to lowest index."""
    n = x.shape[axis]
    if not 1 <= k <= n:
        raise ValueError(f"k must satisfy 1 <= k <= {n}, got {k}")
    moved = np.moveaxis(x, axis, -1)
    # stable sort on -x: descending values, equal values by ascending index
    order = np.argsort(-moved, axis=-1, kind="stable")
    mask = np.zeros(moved.shape, dtype=bool)
    np.put_along_axis(mask, order[..., :k], True, axis=-1)
    return np.moveaxis(mask, -1, axis)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then apply affine."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    d = x.data.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gh = g * gamma.data
        gx = inv * (
            gh
            - gh.mean(axis=-1, keepdims=True)
            - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead) if lead else g * xhat
        gbeta = g.sum(axis=lead) if lead else g
        return (gx, _unbroadcast(ggamma, gamma.data.shape), _unbroadcast(gbeta, beta.data.shape))

    return _emit(out, (x, gamma, beta), backward)


def gather_rows(a: Tensor, rows: np.ndarray) -> Tensor:
    """Select rows (first axis) by integer index; backward scatter-adds."""
    rows = np.asarray(rows, dtype=np.intp)

    def backward(g):
        z = np.zeros_like(a.data)
        np.add.at(z, rows, g)
        return (z,)

    return _emit(a.data[rows], (a,), backward)


def gather_pairs(a: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Select entries of a 2-D tensor at (rows[i], cols[i])."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)

    def backward(g):
        z = np.zeros_like(a.data)
        np.add.at(z, (rows, cols), g)
        return (z,)

    return _emit(a.data[rows, cols], (a,), backward)


def scatter_add_rows(base: Tensor, rows: np.ndarray, update: Tensor) -> Tensor:
    """base with update rows added at the given first-axis indices."""
    rows = np.asarray(rows, dtype=np.intp)
    out = base.data.copy()
    np.add.at(out, rows, update.data)
    return _emit(out, (base, update), lambda g: (g, g[rows]))


def time_gather(x: Tensor, idx: np.ndarray) -> Tensor:
    """out[c, ...] = x[c, idx[...]] for a 2-D series tensor (channels x time)."""
    idx = np.asarray(idx, dtype=np.intp)
    n_ch = x.data.shape[0]
    lead = np.arange(n_ch).reshape((n_ch,) + (1,) * idx.ndim)

    def backward(g):
        z = np.zeros_like(x.data)
        np.add.at(z, (lead, idx[np.newaxis]), g)
        return (z,)

    return _emit(x.data[:, idx], (x,), backward)


def time_scatter(patches: Tensor, idx: np.ndarray, length: int) -> Tensor:
    """Adjoint of time_gather: accumulate patches back onto a time axis."""
    idx = np.asarray(idx, dtype=np.intp)
    n_ch = patches.data.shape[0]
    lead = np.arange(n_ch).reshape((n_ch,) + (1,) * idx.ndim)
    out = np.zeros((n_ch, length), dtype=np.float64)
    np.add.at(out, (lead, idx[np.newaxis]), patches.data)
    return _emit(out, (patches,), lambda g: (g[:, idx],))
