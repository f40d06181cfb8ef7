"""Minimal reverse-mode automatic differentiation over numpy buffers.

The building blocks are an immutable :class:`Tensor` wrapper, a
:class:`Tape` that records operations while active, and a fixed roster of
differentiable primitives (matmul, elementwise arithmetic, softmax, batch
normalization, gathers, and a few shape utilities).  Gradients are computed
by walking the recorded nodes in reverse execution order.

Only two dtypes are supported: float32 ("single", the default) and float64
("double", used by gradient checks and high-precision equivalence runs).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "Parameter",
    "Affine",
    "NormState",
    "ShapeError",
    "IntegrityError",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "stack",
    "index_select",
    "mean_over",
    "reciprocal",
    "sqrt",
    "log",
    "sigmoid",
    "relu",
    "softmax_rows",
    "batch_norm",
    "dropout",
    "record_op",
    "grad_check",
    "zeros",
    "eye",
]

SINGLE = np.float32
DOUBLE = np.float64
_ALLOWED_DTYPES = (np.dtype(SINGLE), np.dtype(DOUBLE))


class ShapeError(ValueError):
    """Raised when operands have shapes an operation does not accept."""


class IntegrityError(ValueError):
    """Raised when a value violates a structural requirement (for example a
    matrix that must be symmetric is not)."""


class Tensor:
    """Immutable dense array of float32 or float64 values.

    Construction copies the input so no outside reference can mutate the
    buffer; the underlying numpy array is marked read-only.  All operations
    return new tensors.
    """

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        arr = np.array(data, dtype=dtype, order="C", copy=True)
        if arr.dtype not in _ALLOWED_DTYPES:
            if np.issubdtype(arr.dtype, np.floating) or np.issubdtype(arr.dtype, np.integer):
                arr = arr.astype(SINGLE)
            else:
                raise TypeError(f"unsupported dtype {arr.dtype!r}; use float32 or float64")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @classmethod
    def _wrap(cls, arr) -> "Tensor":
        # Internal fast path for arrays the library itself allocated.
        out = object.__new__(cls)
        if not isinstance(arr, np.ndarray):
            arr = np.asarray(arr)  # full reductions yield numpy scalars
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        object.__setattr__(out, "data", arr)
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data, dtype=dtype)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """Writable copy of the underlying buffer."""
        return np.array(self.data, copy=True)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name})"

    # Operator sugar; all dispatch to the module-level primitives so that
    # everything goes through the same recording path.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float)):
        return Tensor(np.asarray(x, dtype=like.dtype))
    raise TypeError(f"expected Tensor or scalar, got {type(x).__name__}")


def zeros(shape, dtype=SINGLE) -> Tensor:
    return Tensor._wrap(np.zeros(shape, dtype=dtype))


def eye(n: int, dtype=SINGLE) -> Tensor:
    return Tensor._wrap(np.eye(n, dtype=dtype))


# ---------------------------------------------------------------------------
# Tape


@dataclass
class _Node:
    out: Tensor
    inputs: tuple
    backward: Callable


_STATE = threading.local()


def _active_tape():
    return getattr(_STATE, "tape", None)


class Tape:
    """Records operations on watched tensors for one backward pass.

    Use as a context manager.  Only tensors registered through
    :meth:`watch` (and values computed from them) are tracked; everything
    else is treated as a constant.  ``backward`` may be called repeatedly
    and always rebuilds the gradient map from scratch, so repeated calls
    give bit-identical results.  A tape is not shareable across threads;
    each thread sees its own active tape.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._tracked: set[int] = set()
        self._watched: list[Tensor] = []
        self._grads: dict[int, np.ndarray] | None = None

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise RuntimeError("a Tape is already active in this thread")
        _STATE.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _STATE.tape = None
        return False

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            if not isinstance(t, Tensor):
                raise TypeError("watch() takes Tensor arguments")
            if id(t) not in self._tracked:
                self._tracked.add(id(t))
                self._watched.append(t)  # keep alive so ids stay unique

    def tracks(self, t: Tensor) -> bool:
        return id(t) in self._tracked

    def _record(self, out: Tensor, inputs: tuple, backward: Callable) -> None:
        self._nodes.append(_Node(out, inputs, backward))
        self._tracked.add(id(out))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(tensor) for every tracked tensor.

        ``loss`` must be a single-element tensor that was computed under
        this tape.
        """
        if loss.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._tracked:
            raise ValueError("loss was not computed under this tape")
        if not np.isfinite(loss.data).all():
            raise FloatingPointError("loss is not finite")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self._nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, ig in zip(node.inputs, in_grads):
                if ig is None or id(t) not in self._tracked:
                    continue
                acc = grads.get(id(t))
                grads[id(t)] = ig if acc is None else acc + ig
        self._grads = grads

    def grad(self, t: Tensor) -> np.ndarray:
        if self._grads is None:
            raise RuntimeError("backward() has not been called")
        g = self._grads.get(id(t))
        if g is None:
            if id(t) not in self._tracked:
                raise ValueError("tensor was not watched on this tape")
            g = np.zeros_like(t.data)
        return np.array(g, copy=True)


def record_op(out: Tensor, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Attach a custom differentiable operation to the active tape.

    ``backward(g)`` must return one gradient array (or None) per input, in
    order.  With no active tape, or when no input is tracked, this is a
    no-op, which makes eager inference free of bookkeeping.
    """
    tape = _active_tape()
    if tape is not None and any(tape.tracks(t) for t in inputs):
        tape._record(out, tuple(inputs), backward)
    return out


# ---------------------------------------------------------------------------
# Broadcasting support for elementwise arithmetic.
#
# Full numpy broadcasting is deliberately not exposed.  An operand either
# matches the result shape exactly, is a single element, or matches after
# substituting 1 for some of its last two axes (row vectors against
# matrices, per-matrix scalars against stacked matrices).  Everything else
# is rejected so that shape bugs surface as errors instead of silent
# broadcasts.


def _check_broadcast(sa: tuple, sb: tuple) -> tuple:
    try:
        out = np.broadcast_shapes(sa, sb)
    except ValueError:
        raise ShapeError(f"shapes {sa} and {sb} do not align") from None
    for s in (sa, sb):
        if s == out or int(np.prod(s, dtype=np.int64)) == 1:
            continue
        lead = len(out) - len(s)
        pad = (1,) * lead + s
        for ax in range(len(out)):
            if pad[ax] == out[ax]:
                continue
            # A mismatched axis must be a size-1 axis that is either padded
            # on the left or one of the last two dims.
            if pad[ax] != 1 or (ax >= lead and ax < len(out) - 2):
                raise ShapeError(
                    f"broadcast of {s} against {out} is outside the supported "
                    "patterns (equal shapes, scalars, or size-1 trailing axes)"
                )
    return out


def _sum_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the shape of its source."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    keep = tuple(ax for ax, n in enumerate(shape) if n == 1 and g.shape[ax] != 1)
    if keep:
        g = g.sum(axis=keep, keepdims=True)
    return g.reshape(shape)


def _same_dtype(a: Tensor, b: Tensor) -> None:
    if a.dtype != b.dtype:
        raise TypeError(f"mixed dtypes {a.dtype.name} and {b.dtype.name}")


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _same_dtype(a, b)
    _check_broadcast(a.shape, b.shape)
    out = Tensor._wrap(a.data + b.data)

    def backward(g):
        return _sum_to(g, a.shape), _sum_to(g, b.shape)

    return record_op(out, (a, b), backward)


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _same_dtype(a, b)
    _check_broadcast(a.shape, b.shape)
    out = Tensor._wrap(a.data - b.data)

    def backward(g):
        return _sum_to(g, a.shape), _sum_to(-g, b.shape)

    return record_op(out, (a, b), backward)


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _same_dtype(a, b)
    _check_broadcast(a.shape, b.shape)
    out = Tensor._wrap(a.data * b.data)

    def backward(g):
        return _sum_to(g * b.data, a.shape), _sum_to(g * a.data, b.shape)

    return record_op(out, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor._wrap(a.data * a.dtype.type(s))

    def backward(g):
        return (g * s,)

    return record_op(out, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors or two equally-stacked 3-D tensors."""
    _same_dtype(a, b)
    if a.ndim == b.ndim == 2:
        pass
    elif a.ndim == b.ndim == 3:
        if a.shape[0] != b.shape[0]:
            raise ShapeError(f"stacked matmul needs equal leading dims, got {a.shape} @ {b.shape}")
    else:
        raise ShapeError(f"matmul supports 2-D or stacked 3-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    out = Tensor._wrap(a.data @ b.data)

    def backward(g):
        da = g @ b.data.swapaxes(-1, -2)
        db = a.data.swapaxes(-1, -2) @ g
        return da, db

    return record_op(out, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise ShapeError("transpose needs at least 2 dimensions")
    out = Tensor._wrap(np.ascontiguousarray(a.data.swapaxes(-1, -2)))

    def backward(g):
        return (g.swapaxes(-1, -2),)

    return record_op(out, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = Tensor._wrap(a.data.reshape(shape))
    src = a.shape

    def backward(g):
        return (g.reshape(src),)

    return record_op(out, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    out = Tensor._wrap(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return record_op(out, tensors, backward)


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equal-shape tensors along a new leading axis."""
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("stack needs at least one tensor")
    shape0 = tensors[0].shape
    for t in tensors:
        if t.shape != shape0:
            raise ShapeError(f"stack needs equal shapes, got {shape0} and {t.shape}")
    out = Tensor._wrap(np.stack([t.data for t in tensors]))

    def backward(g):
        return tuple(np.ascontiguousarray(g[i]) for i in range(len(tensors)))

    return record_op(out, tensors, backward)


def index_select(a: Tensor, axis: int, indices) -> Tensor:
    """Gather positions along axis 0 or 1; duplicate indices are allowed.

    The gradient scatter-adds, so repeated indices accumulate.
    """
    if axis not in (0, 1):
        raise ShapeError("index_select supports axis 0 or 1")
    if axis >= a.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {a.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("indices must be one-dimensional")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[axis]):
        raise ShapeError(f"index out of range for axis {axis} of shape {a.shape}")
    out = Tensor._wrap(np.take(a.data, idx, axis=axis))
    src_shape = a.shape

    def backward(g):
        z = np.zeros(src_shape, dtype=g.dtype)
        if axis == 0:
            np.add.at(z, idx, g)
        else:
            np.add.at(z, (slice(None), idx), g)
        return (z,)

    return record_op(out, (a,), backward)


def mean_over(a: Tensor, axes) -> Tensor:
    """Mean over one or more axes; reduced axes are removed from the shape."""
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(sorted(ax % a.ndim for ax in axes))
    if len(set(axes)) != len(axes):
        raise ShapeError(f"duplicate axes {axes}")
    out = Tensor._wrap(a.data.mean(axis=axes))
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    src_shape = a.shape

    def backward(g):
        ge = np.expand_dims(g, axes)
        return (np.broadcast_to(ge / count, src_shape).astype(g.dtype, copy=True),)

    return record_op(out, (a,), backward)


def reciprocal(a: Tensor) -> Tensor:
    out = Tensor._wrap(1.0 / a.data)

    def backward(g):
        return (-g * out.data * out.data,)

    return record_op(out, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    out = Tensor._wrap(np.sqrt(a.data))

    def backward(g):
        return (g / (2.0 * out.data),)

    return record_op(out, (a,), backward)


def log(a: Tensor) -> Tensor:
    out = Tensor._wrap(np.log(a.data))

    def backward(g):
        return (g / a.data,)

    return record_op(out, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # Branch on sign to avoid overflow in exp for large negative inputs.
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = Tensor._wrap(y)

    def backward(g):
        return (g * out.data * (1.0 - out.data),)

    return record_op(out, (a,), backward)


def relu(a: Tensor) -> Tensor:
    out = Tensor._wrap(np.maximum(a.data, 0))

    def backward(g):
        return (g * (a.data > 0),)

    return record_op(out, (a,), backward)


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax along the last axis, stabilized by a per-row max shift."""
    if a.ndim < 2:
        raise ShapeError("softmax_rows needs at least 2 dimensions")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor._wrap(y)

    def backward(g):
        s = out.data
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return record_op(out, (a,), backward)


# ---------------------------------------------------------------------------
# Parameters and small parameterized layers


@dataclass
class Parameter:
    """Named trainable value.  The tensor is rebound on update, never mutated."""

    name: str
    tensor: Tensor
    trainable: bool = True

    @property
    def shape(self) -> tuple:
        return self.tensor.shape

    @property
    def size(self) -> int:
        return self.tensor.size

    def assign(self, data: np.ndarray) -> None:
        if tuple(data.shape) != self.tensor.shape:
            raise ShapeError(f"assign shape {data.shape} != parameter shape {self.tensor.shape}")
        self.tensor = Tensor(data, dtype=self.tensor.dtype)


def _uniform_fan_in(rng: np.random.Generator, fan_in: int, shape, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Affine:
    """Dense layer y = x @ weight + bias acting on the last axis."""

    def __init__(self, weight: Parameter, bias: Parameter | None):
        self.weight = weight
        self.bias = bias

    @classmethod
    def init(cls, name: str, fan_in: int, fan_out: int, rng: np.random.Generator,
             dtype=SINGLE, bias: bool = True) -> "Affine":
        w = Parameter(name + ".w", Tensor._wrap(_uniform_fan_in(rng, fan_in, (fan_in, fan_out), dtype)))
        b = Parameter(name + ".b", zeros((1, fan_out), dtype)) if bias else None
        return cls(w, b)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim > 2:
            # Leading axes are flattened so one 2-D matmul serves the stack.
            lead = x.shape[:-1]
            flat = reshape(x, (-1, x.shape[-1]))
            y = reshape(matmul(flat, self.weight.tensor), lead + (self.weight.shape[1],))
        else:
            y = matmul(x, self.weight.tensor)
        if self.bias is not None:
            y = add(y, self.bias.tensor)
        return y

    def parameters(self) -> Iterable[Parameter]:
        yield self.weight
        if self.bias is not None:
            yield self.bias


@dataclass
class NormState:
    """Per-channel batch normalization parameters and running statistics."""

    gamma: Parameter
    beta: Parameter
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5

    @classmethod
    def init(cls, name: str, channels: int, dtype=SINGLE) -> "NormState":
        return cls(
            gamma=Parameter(name + ".gamma", Tensor._wrap(np.ones((1, channels), dtype=dtype))),
            beta=Parameter(name + ".beta", zeros((1, channels), dtype)),
            running_mean=np.zeros(channels, dtype=DOUBLE),
            running_var=np.ones(channels, dtype=DOUBLE),
        )

    def parameters(self) -> Iterable[Parameter]:
        yield self.gamma
        yield self.beta


def batch_norm(x: Tensor, state: NormState, training: bool) -> Tensor:
    """Normalize a (positions, channels) batch per channel.

    Training mode normalizes with the statistics of the current batch
    (biased variance) and folds them into the running averages with
    ``running = momentum * running + (1 - momentum) * batch``.  Eval mode
    uses the stored running statistics and updates nothing.
    """
    if x.ndim != 2:
        raise ShapeError(f"batch_norm expects (positions, channels), got {x.shape}")
    if x.shape[1] != state.gamma.shape[1]:
        raise ShapeError(f"channel mismatch: input {x.shape[1]}, norm {state.gamma.shape[1]}")
    gamma, beta = state.gamma.tensor, state.beta.tensor
    xd = x.data
    eps = state.eps
    if training:
        if x.shape[0] < 2:
            raise ShapeError("training-mode batch_norm needs at least 2 positions")
        mu = xd.mean(axis=0)
        var = xd.var(axis=0)
        m = state.momentum
        state.running_mean[...] = m * state.running_mean + (1.0 - m) * mu
        state.running_var[...] = m * state.running_var + (1.0 - m) * var
    else:
        mu = state.running_mean.astype(xd.dtype)
        var = state.running_var.astype(xd.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = Tensor._wrap(gamma.data * xhat + beta.data)
    n = xd.shape[0]

    def backward(g):
        dgamma = (g * xhat).sum(axis=0, keepdims=True)
        dbeta = g.sum(axis=0, keepdims=True)
        if training:
            gh = g * gamma.data
            dx = inv * (gh - gh.mean(axis=0) - xhat * (gh * xhat).sum(axis=0) / n)
        else:
            dx = g * gamma.data * inv
        return dx.astype(g.dtype, copy=False), dgamma, dbeta

    return record_op(out, (x, gamma, beta), backward)


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: kept activations are rescaled by 1/(1-rate).

    Eval mode (or rate 0) returns the input unchanged.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return a
    if rng is None:
        raise ValueError("training-mode dropout needs a random generator")
    keep = (rng.random(a.shape) >= rate).astype(a.dtype)
    inv = 1.0 / (1.0 - rate)
    out = Tensor._wrap(a.data * keep * a.dtype.type(inv))

    def backward(g):
        return (g * keep * inv,)

    return record_op(out, (a,), backward)


# ---------------------------------------------------------------------------
# Finite-difference gradient checking


def grad_check(f: Callable[[], Tensor], params: Sequence[Parameter], h: float = 1e-5) -> float:
    """Compare tape gradients of ``f`` against central finite differences.

    ``f`` takes no arguments, reads ``p.tensor`` for each parameter, and
    returns a scalar loss.  All parameters must be double precision.  The
    return value is the worst relative error
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)`` over every
    coordinate of every parameter.
    """
    for p in params:
        if p.tensor.dtype != np.dtype(DOUBLE):
            raise TypeError(f"grad_check requires double precision, {p.name} is {p.tensor.dtype.name}")
    with Tape() as tape:
        for p in params:
            tape.watch(p.tensor)
        loss = f()
        if loss.size != 1:
            raise ShapeError("grad_check objective must be scalar")
        if not np.isfinite(loss.data).all():
            raise FloatingPointError("objective is not finite at the base point")
        tape.backward(loss)
        analytic = {p.name: tape.grad(p.tensor) for p in params}

    worst = 0.0
    for p in params:
        base = p.tensor.numpy()
        an = analytic[p.name]
        flat = base.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            p.tensor = Tensor(base, dtype=DOUBLE)
            up = f().item()
            flat[i] = orig - h
            p.tensor = Tensor(base, dtype=DOUBLE)
            down = f().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            a = an.reshape(-1)[i]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            if err > worst:
                worst = err
        p.tensor = Tensor(base, dtype=DOUBLE)
    return worst
