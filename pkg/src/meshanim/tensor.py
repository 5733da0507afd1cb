"""Dense f64 tensors with tape-recorded reverse-mode differentiation.

Operations executed inside an active :class:`Tape` on tensors that require
gradients are appended to the tape together with a vector-Jacobian rule.
``Tape.gradient`` replays the tape backwards.  Tensors are immutable, and
gradients are returned rather than stored on the tensors, so parameters
can be shared by several tapes running on different threads.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = (x * x).sum()
    >>> tape.gradient(y, [x])[0]
    array([2., 4.])
"""

from __future__ import annotations

import threading

import numpy as np

from .sparse import SparseMatrix


class NonFiniteError(ValueError):
    """Raised when an operation produces NaN or Inf."""


_local = threading.local()


def _active_tape():
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name

    @classmethod
    def _wrap(cls, arr, requires_grad):
        # internal constructor: no copy
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        if arr.flags.writeable:
            arr.flags.writeable = False
        t.data = arr
        t.requires_grad = requires_grad
        t.name = None
        return t

    shape = property(lambda self: self.data.shape)
    ndim = property(lambda self: self.data.ndim)
    size = property(lambda self: self.data.size)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor._wrap(self.data, False)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of executed operations.

    Usable as a context manager; nested tapes are allowed and each one
    records only while it is the innermost active tape.
    """

    def __init__(self):
        self.ops = []  # (output, inputs, vjp)
        self._position = {}

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def record(self, out, inputs, vjp):
        pos = len(self.ops)
        for t in inputs:
            if t.requires_grad:
                p = self._position.get(id(t))
                assert p is None or p < pos, "tape order violated"
        self._position[id(out)] = pos
        self.ops.append((out, inputs, vjp))

    def gradient(self, output, sources):
        """Gradients of scalar ``output`` with respect to each tensor in ``sources``.

        Sources that do not influence the output get zero arrays.
        """
        if output.size != 1:
            raise ValueError(f"gradient needs a scalar output, got shape {output.shape}")
        grads = {id(output): np.ones(output.shape)}
        if output.requires_grad:
            for out, inputs, vjp in reversed(self.ops):
                g = grads.get(id(out))
                if g is None:
                    continue
                for t, gi in zip(inputs, vjp(g)):
                    if gi is None or not t.requires_grad:
                        continue
                    key = id(t)
                    if key in grads:
                        grads[key] = grads[key] + gi
                    else:
                        grads[key] = gi
        result = []
        for s in sources:
            g = grads.get(id(s))
            if g is None:
                result.append(np.zeros(s.shape))
            else:
                result.append(np.array(np.broadcast_to(g, s.shape), dtype=np.float64))
        for g in result:
            if not np.all(np.isfinite(g)):
                raise NonFiniteError("non-finite gradient")
        return result


def _make(arr, inputs, vjp):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("operation produced non-finite values")
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(arr, track)
    if track:
        tape.record(out, inputs, vjp)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- arithmetic

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data  # non-finite results are rejected by _make
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def scale(a, c):
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def relu(a):
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def square(a):
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def sqrt(a):
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g / (2.0 * out),))


def norm(a, axis=None, keepdims=False):
    """Euclidean norm; the subgradient at the origin is taken as zero."""
    out = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True))

    def vjp(g):
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, a.data / safe, 0.0) * g,)

    res = out if keepdims else (out.reshape(()) if axis is None else np.squeeze(out, axis=axis))
    return _make(res, (a,), vjp)


def tsum(a, axis=None, keepdims=False):
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _make(out, (a,), vjp)


def mean(a, axis=None, keepdims=False):
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(tsum(a, axis, keepdims), 1.0 / count)


# ---------------------------------------------------------------- products

def matmul(a, b):
    """``a @ b`` for 2-D operands, or a batched left operand ``(..., m, k) @ (k, n)``."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            k, n = b.shape
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        return ga, gb

    return _make(out, (a, b), vjp)


def sparse_matmul(s: SparseMatrix, x):
    """Constant sparse ``s`` times dense ``x`` (2-D, or 3-D batch along axis 0)."""
    x = as_tensor(x)
    out = s.dot(x.data)
    return _make(out, (x,), lambda g: (s.dot_transposed(g),))


# ---------------------------------------------------------------- structure

def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def vjp(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return _make(out, tuple(tensors), vjp)


def getitem(a, index):
    out = a.data[index]

    def vjp(g):
        full = np.zeros(a.shape)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out), (a,), vjp)


def take(a, indices, axis=0):
    """Gather along ``axis``; repeated indices accumulate in the backward pass."""
    indices = np.asarray(indices, dtype=np.int64)
    out = np.take(a.data, indices, axis=axis)

    def vjp(g):
        moved = np.moveaxis(g, axis, 0).reshape(indices.size, -1)
        rest = np.moveaxis(np.zeros(a.shape), axis, 0)
        flat = rest.reshape(a.shape[axis], -1)
        for col in range(flat.shape[1]):
            flat[:, col] = np.bincount(indices.ravel(), weights=moved[:, col],
                                       minlength=a.shape[axis])
        return (np.moveaxis(flat.reshape(rest.shape), 0, axis),)

    return _make(out, (a,), vjp)


def transpose(a, axes=None):
    out = np.transpose(a.data, axes)
    inverse = None if axes is None else np.argsort(axes)
    return _make(out, (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a, shape):
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def cross(a, b):
    """Cross product along the last axis (length 3)."""
    a, b = as_tensor(a), as_tensor(b)
    return _make(np.cross(a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(np.cross(b.data, g), a.shape),
                            _unbroadcast(np.cross(g, a.data), b.shape)))


# ---------------------------------------------------------------- checking

def finite_diff_check(f, x, eps=1e-5):
    """Max over coordinates of ``|analytic - central difference| / max(1, |analytic|)``.

    ``f`` maps a Tensor to a scalar Tensor.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = Tensor(base, requires_grad=True)
    with Tape() as tape:
        out = f(leaf)
    analytic = tape.gradient(out, [leaf])[0]
    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(Tensor(base)).data)
        flat[i] = orig - eps
        lo = float(f(Tensor(base)).data)
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NonFiniteError(f"non-finite evaluation at coordinate {i}")
        numeric.reshape(-1)[i] = (hi - lo) / (2 * eps)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic)), initial=0.0))
