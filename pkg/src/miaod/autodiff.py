"""Tape-based reverse-mode automatic differentiation over dense float64 arrays.

Only the operators the detector and its objectives need are provided. Every
operation whose inputs require a gradient is appended to the active
:class:`Tape`; :func:`backward` walks that tape in exact reverse recording
order.

Example::

    x = Tensor([3.0], requires_grad=True)
    with Tape() as tape:
        y = (x * x).sum()
    tape.backward(y)
    x.grad  # array([6.])
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

CLAMP_EPS = 1e-12


class ShapeError(ValueError):
    """Operand shapes do not conform for an operator."""


class NumericFault(FloatingPointError):
    """An operator produced NaN or Inf."""

    def __init__(self, op: str, context: str = ""):
        self.op = op
        msg = f"non-finite output from operator '{op}'"
        if context:
            msg += f" ({context})"
        super().__init__(msg)


class TapeError(RuntimeError):
    """Backward was requested on a root with no intact recording."""


class Tensor:
    """Dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name")
    # make ndarray (op) Tensor dispatch to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass
class _Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    rule: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    tape: Tape


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Usable as a context manager; operations executed inside the ``with`` block
    are recorded here. Nested tapes shadow outer ones.
    """

    nodes: list[_Node] = field(default_factory=list)
    cleared: bool = False

    def __enter__(self) -> Tape:
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().remove(self)

    def record(self, node: _Node) -> None:
        if self.cleared:
            raise TapeError("cannot record on a cleared tape")
        self.nodes.append(node)

    def clear(self) -> None:
        for node in self.nodes:
            node.output._node = None
        self.nodes = []
        self.cleared = True

    def backward(self, root: Tensor) -> None:
        backward(root)


_local = threading.local()


def _stack() -> list[Tape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def _default_tape() -> Tape:
    tape = getattr(_local, "default", None)
    if tape is None or tape.cleared:
        tape = Tape()
        _local.default = tape
    return tape


def active_tape() -> Tape:
    stack = _stack()
    return stack[-1] if stack else _default_tape()


class no_grad:
    """Context in which operators compute values without recording."""

    def __enter__(self) -> None:
        self._prev = getattr(_local, "disabled", False)
        _local.disabled = True

    def __exit__(self, *exc) -> None:
        _local.disabled = self._prev


def reset_default_tape() -> None:
    """Drop everything recorded outside an explicit ``with Tape()`` block."""
    tape = getattr(_local, "default", None)
    if tape is not None:
        tape.clear()
    _local.default = None


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    t = Tensor.__new__(Tensor)
    t.data = np.array(x, dtype=np.float64)
    t.requires_grad, t.grad, t._node, t.name = False, None, None, None
    return t


def _check_finite(op: str, out: np.ndarray) -> None:
    # a finite sum proves every element finite; only overflow needs the full scan
    if not math.isfinite(np.add.reduce(out, axis=None)) and not np.isfinite(out).all():
        raise NumericFault(op)


def _make(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], rule) -> Tensor:
    if not math.isfinite(np.add.reduce(out, axis=None)):
        _check_finite(op, out)
    result = Tensor.__new__(Tensor)
    result.data = out
    result.grad = None
    result.name = None
    result._node = None
    result.requires_grad = not getattr(_local, "disabled", False) and any(
        t.requires_grad for t in inputs)
    if result.requires_grad:
        tape = active_tape()
        node = _Node(op, inputs, result, rule, tape)
        tape.record(node)
        result._node = node
    return result


def primitive(op: str, value: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    """Record a fused operator whose vector-Jacobian product ``vjp(g)`` is supplied by the caller.

    ``vjp`` returns one gradient array per input, shaped like that input.
    """
    return _make(op, np.asarray(value, dtype=np.float64), tuple(_as_tensor(t) for t in inputs), vjp)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    if a.shape == b.shape:
        return a.shape
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    """Elementwise ``a / b`` with the denominator clamped to at least 1e-12."""
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("div", a, b)
    den = np.maximum(b.data, CLAMP_EPS)
    live = b.data >= CLAMP_EPS

    def rule(g):
        ga = _unbroadcast(g / den, a.shape)
        gb = _unbroadcast(np.where(live, -g * a.data / (den * den), 0.0), b.shape)
        return ga, gb

    return _make("div", a.data / den, (a, b), rule)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _make("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    """Natural log with the input clamped to at least 1e-12."""
    a = _as_tensor(a)
    live = a.data >= CLAMP_EPS
    x = np.maximum(a.data, CLAMP_EPS)
    return _make("log", np.log(x), (a,), lambda g: (np.where(live, g / x, 0.0),))


def abs_(a) -> Tensor:
    a = _as_tensor(a)
    sign = np.sign(a.data)
    return _make("abs", np.abs(a.data), (a,), lambda g: (g * sign,))


def power(a, exponent: float) -> Tensor:
    a = _as_tensor(a)
    p = float(exponent)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.power(a.data, p)

    def rule(g):
        if p == 0.0:
            return (np.zeros_like(a.data),)
        if p == 1.0:
            return (g,)
        with np.errstate(divide="ignore", invalid="ignore"):
            local = p * np.power(a.data, p - 1.0)
        # x**p with p > 1 has zero slope at x = 0
        local = np.where((a.data == 0) & (p > 1.0), 0.0, local)
        return (g * local,)

    return _make("pow", out, (a,), rule)


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    a = _as_tensor(a)
    out = np.clip(a.data, lo, hi)
    live = np.ones(a.shape, dtype=bool)
    if lo is not None:
        live &= a.data >= lo
    if hi is not None:
        live &= a.data <= hi
    return _make("clamp", out, (a,), lambda g: (g * live,))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return _make("matmul", a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x, weight, bias) -> Tensor:
    """Affine map ``x @ weight + bias`` for row-stacked inputs."""
    return add(matmul(x, weight), bias)


# ---------------------------------------------------------------- reductions / shape


def _norm_axis(axis, ndim: int, op: str):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"{op}: axis {ax} out of range for {ndim}-d input")
        out.append(ax % ndim)
    return tuple(out)


def _expand(g: np.ndarray, shape, axes, keepdims: bool) -> np.ndarray:
    if axes is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axis(axis, a.ndim, "sum")
    out = np.add.reduce(a.data, axis=axes, keepdims=keepdims)
    return _make("sum", np.asarray(out, dtype=np.float64), (a,),
                 lambda g: (np.array(_expand(g, a.shape, axes, keepdims)),))


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axis(axis, a.ndim, "mean")
    count = a.size if axes is None else int(np.prod([a.shape[ax] for ax in axes]))
    out = np.mean(a.data, axis=axes, keepdims=keepdims) if count else np.zeros(())
    return _make("mean", np.asarray(out, dtype=np.float64), (a,),
                 lambda g: (np.array(_expand(g, a.shape, axes, keepdims)) / max(count, 1),))


def max_(a, axis: int, keepdims: bool = False) -> Tensor:
    """Maximum along one axis; the gradient goes to the first maximiser."""
    a = _as_tensor(a)
    (ax,) = _norm_axis(axis, a.ndim, "max")
    idx = np.argmax(a.data, axis=ax)
    out = np.take_along_axis(a.data, np.expand_dims(idx, ax), axis=ax)
    if not keepdims:
        out = np.squeeze(out, axis=ax)

    def rule(g):
        full = np.zeros_like(a.data)
        gk = g if keepdims else np.expand_dims(g, ax)
        np.put_along_axis(full, np.expand_dims(idx, ax), gk, axis=ax)
        return (full,)

    return _make("max", out, (a,), rule)


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    (ax,) = _norm_axis(axis, a.ndim, "softmax")
    shifted = a.data - np.max(a.data, axis=ax, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=ax, keepdims=True)

    def rule(g):
        return (out * (g - np.sum(g * out, axis=ax, keepdims=True)),)

    return _make("softmax", out, (a,), rule)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _make("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def index_rows(a, rows) -> Tensor:
    """Gather ``a[rows]`` along the leading axis."""
    a = _as_tensor(a)
    rows = np.asarray(rows, dtype=np.intp)

    def rule(g):
        full = np.zeros_like(a.data)
        np.add.at(full, rows, g)
        return (full,)

    return _make("index_rows", a.data[rows], (a,), rule)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make("concat", out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


# ---------------------------------------------------------------- gradients


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf needing it.

    Calling twice without zeroing leaf gradients adds the contributions.
    """
    if root.size != 1:
        raise TapeError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    node = root._node
    if node is None or node.tape.cleared:
        raise TapeError("root is not attached to an intact tape")
    tape = node.tape
    pos = len(tape.nodes) - 1
    while pos >= 0 and tape.nodes[pos] is not node:
        pos -= 1
    if pos < 0:
        raise TapeError("root is not attached to an intact tape")

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for n in reversed(tape.nodes[: pos + 1]):
        g = grads.pop(id(n.output), None)
        if g is None:
            continue
        for inp, gi in zip(n.inputs, n.rule(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                grads[key] = grads[key] + gi if key in grads else gi


@dataclass
class GradCheckReport:
    max_rel_error: list[float]
    tol: float

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.max_rel_error)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error, default=0.0)


class NonDeterministicFunction(RuntimeError):
    pass


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-6,
               tol: float = 1e-4, atol: float = 1e-8) -> GradCheckReport:
    """Compare analytic gradients of ``f()`` with central differences.

    The relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    The floor is the larger of ``atol`` and the gradient size at which the
    rounding noise of the difference quotient (about ``eps * |f| / step``) alone
    would reach ``tol``; below it a coordinate's gradient is indistinguishable
    from zero at this step size and is judged on absolute error instead.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    for p in params:
        p.grad = None
    with Tape() as tape:
        root = f()
    base = float(root.data)
    with no_grad():
        again = float(f().data)
    if again != base:
        raise NonDeterministicFunction("f returned different values on repeated evaluation")
    tape.backward(root)
    tape.clear()

    errors = []
    with no_grad():
        floor = max(atol, np.finfo(float).eps * max(abs(base), 1.0) / step / tol)
        errors = _numeric_errors(f, params, step, floor)
    return GradCheckReport(errors, tol)


def _numeric_errors(f, params, step, floor) -> list[float]:
    errors = []
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            hi = float(f().data)
            flat[j] = orig - step
            lo = float(f().data)
            flat[j] = orig
            numeric.reshape(-1)[j] = (hi - lo) / (2 * step)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
        rel = np.abs(analytic - numeric) / denom
        errors.append(float(rel.max()) if rel.size else 0.0)
    return errors
