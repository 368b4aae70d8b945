"""Dense double-precision tensors with a reverse-mode gradient tape.

Tensors are 0-, 1- or 2-D numpy float64 arrays. Operations executed while a
:class:`Tape` is active (``with Tape() as tape:``) and touching at least one
tensor that requires a gradient are recorded; :func:`backward` then walks the
record in reverse. Outside a tape the same functions are plain numpy math, which
is the path used for evaluation.

ReLU (and max-with-zero) use subgradient 0 at 0.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_local = threading.local()


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class NonDeterministicLoss(RuntimeError):
    pass


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("value", "requires_grad", "name", "__weakref__")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None, check: bool = True):
        v = np.asarray(value, dtype=np.float64)
        if v.ndim > 2:
            raise ShapeError(f"tensors are at most 2-D, got shape {v.shape}")
        if check and not np.all(np.isfinite(v)):
            raise NonFiniteError(f"non-finite input values{' for ' + name if name else ''}")
        self.value = v
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.value)))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, grad={self.requires_grad})"

    # operator sugar
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __matmul__(self, o): return matmul(self, o)
    def __neg__(self): return mul(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    op: str
    out: Tensor
    parents: tuple
    forward: Callable  # parent values -> output value
    vjp: Callable  # (grad_out, parent values, out value) -> tuple of parent grads


class Tape:
    """Ordered record of primitive applications; one per thread, never shared."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.leaves: list[Tensor] = []

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def watch(self, value, name: str | None = None) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self.leaves.append(t)
        return t

    def replay(self) -> bool:
        """Recompute every recorded op from its parents; True if all values match bit-for-bit."""
        for n in self.nodes:
            v = n.forward(*[p.value for p in n.parents])
            if v.shape != n.out.value.shape or not np.array_equal(v, n.out.value):
                return False
        return True


def _record(op: str, parents: Sequence[Tensor], forward, vjp) -> Tensor:
    out = Tensor(forward(*[p.value for p in parents]), check=False)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.nodes.append(_Node(op, out, tuple(parents), forward, vjp))
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _bshape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("add", a, b)
    return _record("add", (a, b), np.add,
                   lambda g, x, y, out: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("sub", a, b)
    return _record("sub", (a, b), np.subtract,
                   lambda g, x, y, out: (_unbroadcast(g, x.shape), _unbroadcast(-g, y.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("mul", a, b)
    return _record("mul", (a, b), np.multiply,
                   lambda g, x, y, out: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("div", a, b)
    return _record("div", (a, b), np.divide,
                   lambda g, x, y, out: (_unbroadcast(g / y, x.shape), _unbroadcast(-g * x / (y * y), y.shape)))


def relu(a) -> Tensor:
    a = as_tensor(a)
    return _record("relu", (a,), lambda x: np.maximum(x, 0.0),
                   lambda g, x, out: (g * (x > 0),))


maximum0 = relu


def exp(a) -> Tensor:
    a = as_tensor(a)
    return _record("exp", (a,), np.exp, lambda g, x, out: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _record("log", (a,), np.log, lambda g, x, out: (g / x,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    return _record("sqrt", (a,), np.sqrt, lambda g, x, out: (g / (2.0 * out),))


# -- linear algebra and structure ----------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix-matrix, matrix-vector, vector-matrix or dot product."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError(f"matmul: scalar operand, shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, shapes {a.shape} and {b.shape}")

    def vjp(g, x, y, out):
        if x.ndim == 2 and y.ndim == 2:
            return g @ y.T, x.T @ g
        if x.ndim == 2:  # matrix @ vector
            return np.outer(g, y), x.T @ g
        if y.ndim == 2:  # vector @ matrix
            return y @ g, np.outer(x, g)
        return g * y, g * x

    return _record("matmul", (a, b), np.matmul, vjp)


matvec = matmul


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    if axis is not None and not (-a.ndim <= axis < a.ndim):
        raise ShapeError(f"sum: axis {axis} out of range for shape {a.shape}")

    def vjp(g, x, out):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _record("sum", (a,), lambda x: np.sum(x, axis=axis), vjp)


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    nd = {p.ndim for p in parts}
    if len(nd) != 1:
        raise ShapeError(f"concat: mixed ranks {[p.shape for p in parts]}")
    for p in parts[1:]:
        other = [s for i, s in enumerate(p.shape) if i != axis]
        ref = [s for i, s in enumerate(parts[0].shape) if i != axis]
        if other != ref:
            raise ShapeError(f"concat: shapes {[q.shape for q in parts]} differ off axis {axis}")
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def vjp(g, *xs_out):
        return tuple(np.split(g, cuts, axis=axis))

    return _record("concat", parts, lambda *xs: np.concatenate(xs, axis=axis), vjp)


def take(a, idx) -> Tensor:
    """Gather along axis 0 (rows of a matrix, entries of a vector)."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"take: index must be 1-D, got shape {idx.shape}")
    if len(idx) and (idx.min() < -a.shape[0] or idx.max() >= a.shape[0]):
        raise ShapeError(f"take: index out of range for shape {a.shape}")

    def vjp(g, x, out):
        full = np.zeros_like(x)
        np.add.at(full, idx, g)
        return (full,)

    return _record("take", (a,), lambda x: x[idx], vjp)


def segment_sum(a, segments, n: int) -> Tensor:
    """Sum rows of ``a`` into ``n`` buckets given by ``segments`` (row -> bucket)."""
    a = as_tensor(a)
    seg = np.asarray(segments, dtype=np.int64)
    if seg.shape != (a.shape[0],):
        raise ShapeError(f"segment_sum: {len(seg)} segment ids for shape {a.shape}")

    def fwd(x):
        out = np.zeros((n,) + x.shape[1:])
        np.add.at(out, seg, x)
        return out

    return _record("segment_sum", (a,), fwd, lambda g, x, out: (g[seg],))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        np.empty(a.shape).reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _record("reshape", (a,), lambda x: x.reshape(shape), lambda g, x, out: (g.reshape(x.shape),))


def forward_primitive(op: str, *operands) -> Tensor:
    """Apply a primitive by name (``matvec``, ``add``, ``relu``, ...)."""
    try:
        fn = _PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}") from None
    return fn(*operands)


_PRIMITIVES = {
    "add": add, "sub": sub, "mul": mul, "div": div, "relu": relu, "max0": maximum0,
    "exp": exp, "log": log, "sqrt": sqrt, "matmul": matmul, "matvec": matvec,
    "sum": sum, "concat": lambda *ps: concat(ps), "take": take,
}


# -- reverse pass ----------------------------------------------------------

def backward(tape: Tape, root: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradients of scalar ``root`` for every leaf watched on ``tape``.

    Leaves that do not influence ``root`` get zero arrays.
    """
    if root.value.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        pgrads = node.vjp(g, *[p.value for p in node.parents], node.out.value)
        for p, pg in zip(node.parents, pgrads):
            if not p.requires_grad or pg is None:
                continue
            k = id(p)
            if k in grads:
                grads[k] = grads[k] + pg
            else:
                grads[k] = np.array(pg, dtype=np.float64)
    out = {}
    for leaf in tape.leaves:
        g = grads.get(id(leaf))
        out[leaf] = np.zeros_like(leaf.value) if g is None else g.reshape(leaf.value.shape)
    return out


def value_and_grad(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray]) -> tuple[float, list[np.ndarray]]:
    """Evaluate ``fn(*leaves)`` on a fresh tape and return (value, gradients)."""
    with Tape() as tape:
        leaves = [tape.watch(a) for a in arrays]
        root = fn(*leaves)
    g = backward(tape, root)
    return float(root.value), [g[leaf] for leaf in leaves]


# -- finite-difference checking --------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: tuple[int, int] | None  # (param index, flat coordinate)
    rel_errors: list[np.ndarray]
    analytic: list[np.ndarray]
    numeric: list[np.ndarray]
    flagged: list[tuple[int, int]] = field(default_factory=list)  # suspected kinks

    def max_rel_error_excluding(self, excluded) -> tuple[float, tuple[int, int] | None]:
        excluded = set(excluded)
        best, where = 0.0, None
        for i, err in enumerate(self.rel_errors):
            for j in np.argsort(-err.ravel(), kind="stable"):
                if (i, int(j)) in excluded:
                    continue
                if err.ravel()[j] > best:
                    best, where = float(err.ravel()[j]), (i, int(j))
                break
        return best, where

    def max_rel_error_smooth(self) -> tuple[float, tuple[int, int] | None]:
        return self.max_rel_error_excluding(self.flagged)


def rel_error(a, f):
    a, f = np.asarray(a), np.asarray(f)
    return np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-8)


def grad_check(loss_fn: Callable[..., Tensor], params: Sequence[np.ndarray], step: float = 1e-5,
               tolerance: float = 1e-4, kink_tol: float = 1e-2) -> GradCheckReport:
    """Compare tape gradients of ``loss_fn(*params)`` against central differences.

    A coordinate is flagged as a suspected kink when its one-sided difference
    quotients disagree by more than ``kink_tol`` (scaled by max(1, |slope|)).
    ``tolerance`` is informational; callers assert on the report.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params = [np.array(p, dtype=np.float64) for p in params]

    def f(ps):
        return float(loss_fn(*[Tensor(p) for p in ps]).value)

    f0 = f(params)
    if f(params) != f0:
        raise NonDeterministicLoss("loss_fn returned different values on identical inputs")
    value, analytic = value_and_grad(loss_fn, params)
    if value != f0:
        raise NonDeterministicLoss("taped and untaped forward passes disagree")

    numeric, errs, flagged = [], [], []
    for i, p in enumerate(params):
        num = np.zeros_like(p)
        flat = p.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            fp = f(params)
            flat[j] = orig - step
            fm = f(params)
            flat[j] = orig
            num.reshape(-1)[j] = (fp - fm) / (2 * step)
            fwd, bwd = (fp - f0) / step, (f0 - fm) / step
            if abs(fwd - bwd) > kink_tol * max(1.0, abs(fwd), abs(bwd)):
                flagged.append((i, j))
        numeric.append(num)
        errs.append(rel_error(analytic[i], num))
    worst, mx = None, 0.0
    for i, e in enumerate(errs):
        if e.size and e.max() > mx:
            mx = float(e.max())
            worst = (i, int(np.argmax(e)))
    return GradCheckReport(mx, worst, errs, analytic, numeric, flagged)
