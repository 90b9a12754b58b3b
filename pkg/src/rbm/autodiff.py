"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every primitive records a node on the active :class:`Tape` when at least one
input requires a gradient. ``Tape.backward`` walks the nodes in reverse
creation order, which is a valid reverse topological order because a node's
inputs always exist before the node itself.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to an operation."""


class TapeError(RuntimeError):
    """Raised on misuse of the tape (non-scalar loss, replayed backward, stale inputs)."""


class NonFiniteError(FloatingPointError):
    """Raised when a tensor or gradient holds NaN or Inf."""


class Tape:
    """Ordered record of primitive operations for one forward/backward cycle."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.generation = 0
        self.enabled = True

    def record(self, node: "Tensor") -> None:
        node._tape = self
        node._generation = self.generation
        self.nodes.append(node)

    def reset(self) -> None:
        self.nodes = []
        self.generation += 1

    def backward(self, loss: "Tensor") -> dict["Tensor", np.ndarray]:
        """Propagate d(loss)/d(.) to every reachable leaf that requires a gradient.

        Leaf gradients are accumulated into ``leaf.grad`` and also returned.
        The tape is reset afterwards, so the same loss cannot be replayed.
        """
        if loss.data.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._backward is None:
            if loss.requires_grad:
                # loss is itself a parameter
                g = np.ones_like(loss.data)
                loss.grad = g if loss.grad is None else loss.grad + g
                return {loss: g}
            # constant loss: every parameter gradient is zero
            self.reset()
            return {}
        if loss._tape is not self or loss._generation != self.generation:
            raise TapeError("loss was not produced on the current tape (backward already run?)")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if parent._backward is None:
                    leaves[key] = parent
                prev = grads.get(key)
                grads[key] = pg if prev is None else prev + pg
        out = {}
        for key, leaf in leaves.items():
            g = grads[key]
            leaf.grad = g if leaf.grad is None else leaf.grad + g
            out[leaf] = g
        self.reset()
        return out


_local = threading.local()


def current_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording them (rollouts, scoring, decoding)."""
    tape = current_tape()
    prev = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = prev


def backward(loss: "Tensor") -> dict["Tensor", np.ndarray]:
    return current_tape().backward(loss)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward",
                 "_op", "_tape", "_generation", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op: str | None = None
        self._tape: Tape | None = None
        self._generation = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def check_finite(self) -> None:
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"non-finite values in tensor {self.name or self._op or '?'}")

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, op={self._op})"

    def __hash__(self) -> int:
        return id(self)

    def __eq__(self, other) -> bool:
        return self is other

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, key): return index(self, key)

    def sum(self, axis=None, keepdims=False): return sum_(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True, name=name)


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._op = op
    out._tape = None
    out._generation = -1
    tape = current_tape()
    if tape.enabled and any(p.requires_grad for p in parents):
        for p in parents:
            if p._backward is not None and p._generation != tape.generation:
                raise TapeError(f"{op}: input from a previous tape generation")
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        tape.record(out)
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# elementwise binary ops -----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def matmul(a, b) -> Tensor:
    """Matrix product with numpy semantics for 2-D and batched (≥3-D) operands."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data

    def bw(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make("matmul", out, (a, b), bw)


# structural ops -------------------------------------------------------------

def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no inputs")
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or any(t.shape[i] != ts[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {ts[0].shape} and {t.shape} on axis {axis}")
    sizes = [t.shape[ax] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make("concat", np.concatenate([t.data for t in ts], axis=ax), ts, bw)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    shape = ts[0].shape
    for t in ts[1:]:
        if t.shape != shape:
            raise ShapeError(f"stack: incompatible shapes {shape} and {t.shape}")
    ax = axis % (len(shape) + 1)

    def bw(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(ts)))

    return _make("stack", np.stack([t.data for t in ts], axis=ax), ts, bw)


def index(x, key) -> Tensor:
    """Basic or advanced numpy indexing (slices, integer arrays); gradient scatters back."""
    x = as_tensor(x)
    try:
        out = x.data[key]
    except IndexError as e:
        raise ShapeError(f"slice: {e} for shape {x.shape}") from None
    shape = x.shape
    keys = key if isinstance(key, tuple) else (key,)
    advanced = any(isinstance(k, (np.ndarray, list)) for k in keys)

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        if advanced:
            np.add.at(full, key, g)
        else:
            full[key] = g
        return (full,)

    return _make("slice", np.array(out, dtype=DTYPE), (x,), bw)


def gather_rows(table, ids) -> Tensor:
    """``table[ids]`` for an integer id array of any shape (embedding lookup)."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"gather-rows: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"gather-rows: ids out of range for table {table.shape}")
    shape = table.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _make("gather-rows", table.data[ids], (table,), bw)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} to {tuple(shape)}") from None
    return _make("reshape", out, (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    inv = np.argsort(axes)
    return _make("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swap_last(x) -> Tensor:
    axes = list(range(as_tensor(x).ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


# elementwise unary ops ------------------------------------------------------

def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid_np(x.data)
    return _make("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.data)
    return _make("tanh", t, (x,), lambda g: (g * (1.0 - t * t),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    m = x.data > 0
    return _make("relu", np.where(m, x.data, 0.0), (x,), lambda g: (g * m,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    e = np.exp(x.data)
    return _make("exp", e, (x,), lambda g: (g * e,))


class UnderflowCounter:
    """Counts log-argument entries that were raised to the probability floor."""

    def __init__(self):
        self.count = 0


underflow = UnderflowCounter()


def log(x, floor: float | None = None) -> Tensor:
    """Natural log; with ``floor`` the argument is clamped from below first.

    Clamped entries get zero gradient and are tallied in ``underflow.count``.
    """
    x = as_tensor(x)
    d = x.data
    if floor is not None:
        low = d < floor
        n_low = int(low.sum())
        if n_low:
            underflow.count += n_low
            d = np.where(low, floor, d)
            return _make("log", np.log(d), (x,), lambda g: (np.where(low, 0.0, g / d),))
    return _make("log", np.log(d), (x,), lambda g: (g / d,))


# reductions and normalizers -------------------------------------------------

def _softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    s = _softmax_np(x.data, axis)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make("softmax", s, (x,), bw)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def bw(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return _make("log-softmax", out, (x,), bw)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make("sum", np.asarray(out, dtype=DTYPE), (x,), bw)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis, keepdims), 1.0 / n)


def max_(x, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Max along one axis; the gradient goes to the first maximal entry."""
    x = as_tensor(x)
    idx = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis)
    shape = x.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        full = np.zeros(shape, dtype=DTYPE)
        np.put_along_axis(full, np.expand_dims(idx, axis), g, axis=axis)
        return (full,)

    return _make("max", out if keepdims else np.squeeze(out, axis), (x,), bw)


def forward(op_kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch a primitive by name (matmul, add, mul, concat, slice, ...)."""
    try:
        fn = _OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op-kind {op_kind!r}") from None
    if op_kind == "concat":
        return fn(inputs, **kwargs)
    return fn(*inputs, **kwargs)


_OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul, "add": add, "sub": sub, "mul": mul, "concat": concat,
    "slice": index, "gather-rows": gather_rows, "softmax": softmax,
    "log-softmax": log_softmax, "sigmoid": sigmoid, "tanh": tanh, "relu": relu,
    "log": log, "exp": exp, "sum": sum_, "mean": mean, "max": max_,
    "reshape": reshape, "transpose": transpose,
}


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
