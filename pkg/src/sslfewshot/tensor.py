"""Dense float64 tensors with an explicit reverse-mode gradient tape.

A :class:`Tensor` is an immutable value. Tensors created through
:meth:`GradientTape.watch`, or computed from such tensors, carry a handle into
the tape that recorded them; everything else is a constant. Each forward pass
gets its own tape, so independent passes can run on different threads.

Broadcasting is limited to what the losses need: a row vector (1 x n), a
column vector (m x 1) or a scalar against a matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GradientTape",
    "DimensionError",
    "GradCheckResult",
    "constant",
    "backward",
    "finite_diff_check",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "neg",
    "relu",
    "exp",
    "log",
    "sqrt",
    "absolute",
    "sum",
    "mean",
    "gather_rows",
    "transpose",
    "l2_normalize_rows",
    "l2_normalize_cols",
    "log_sum_exp_rows",
    "stop_gradient",
]

VJP = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class Tensor:
    """Immutable float64 array, optionally recorded on a gradient tape."""

    __slots__ = ("data", "tape", "node")
    __array_priority__ = 100

    def __init__(self, data, tape: "GradientTape | None" = None, node: int | None = None):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def on_tape(self) -> bool:
        return self.tape is not None

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        where = f", node={self.node}" if self.on_tape else ""
        return f"Tensor(shape={self.shape}{where})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


def constant(x) -> Tensor:
    """Wrap ``x`` as an off-tape tensor; tensors pass through unchanged."""
    return x if isinstance(x, Tensor) else Tensor(x)


class GradientTape:
    """Append-only record of differentiable operations.

    Nodes are appended in execution order, so parents always precede their
    children and a reverse sweep is a valid topological order.
    """

    def __init__(self):
        self._parents: list[tuple[int | None, ...]] = []
        self._vjps: list[VJP | None] = []
        self._shapes: list[tuple[int, ...]] = []
        self.named: dict[str, Tensor] = {}

    def __len__(self) -> int:
        return len(self._parents)

    def watch(self, x, name: str | None = None) -> Tensor:
        """Register ``x`` as a differentiable leaf and return its tensor."""
        data = x.data if isinstance(x, Tensor) else x
        t = self._append(np.asarray(data, dtype=np.float64), (), None)
        if name is not None:
            if name in self.named:
                raise ValueError(f"parameter {name!r} already watched on this tape")
            self.named[name] = t
        return t

    @property
    def leaves(self) -> list[int]:
        return [i for i, p in enumerate(self._parents) if self._vjps[i] is None]

    def _append(self, data: np.ndarray, parents: tuple[int | None, ...], vjp: VJP | None) -> Tensor:
        node = len(self._parents)
        self._parents.append(parents)
        self._vjps.append(vjp)
        self._shapes.append(data.shape)
        return Tensor(data, self, node)

    def gradient(self, root: Tensor, sources: Iterable[Tensor]) -> list[np.ndarray]:
        """Gradients of ``root`` w.r.t. ``sources``; zeros where unreachable."""
        grads = backward(self, root)
        return [grads.get(s.node, np.zeros(s.shape)) for s in sources]


def _tape_of(inputs: Sequence[Tensor]) -> GradientTape | None:
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ValueError("operands are recorded on different tapes")
            tape = t.tape
    return tape


def _record(data: np.ndarray, inputs: Sequence[Tensor], vjp: VJP) -> Tensor:
    tape = _tape_of(inputs)
    if tape is None:
        return Tensor(data)
    parents = tuple(t.node for t in inputs)
    return tape._append(np.asarray(data, dtype=np.float64), parents, vjp)


def backward(tape: GradientTape, root: Tensor) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar ``root``.

    Returns a map from node handle to gradient array for every node reachable
    from ``root``; fan-out contributions are summed.
    """
    if root.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if root.tape is not tape:
        raise ValueError("root was not recorded on this tape")
    grads: dict[int, np.ndarray] = {root.node: np.ones(root.shape)}
    for node in range(root.node, -1, -1):
        g = grads.get(node)
        vjp = tape._vjps[node]
        if g is None or vjp is None:
            continue
        for parent, pg in zip(tape._parents[node], vjp(g)):
            if parent is None or pg is None:
                continue
            if parent in grads:
                grads[parent] = grads[parent] + pg
            else:
                grads[parent] = pg
    return grads


# -- broadcasting helpers ----------------------------------------------------

def _broadcast_shape(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    if a == b:
        return a
    try:
        out = np.broadcast_shapes(a, b)
    except ValueError:
        raise DimensionError(f"cannot broadcast shapes {a} and {b}") from None
    if len(out) > 2:
        raise DimensionError(f"broadcasting beyond matrices is unsupported: {a} and {b}")
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _binary(a, b, fn, grad_a, grad_b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape(a.shape, b.shape)
    out = fn(a.data, b.data)
    sa, sb = a.shape, b.shape

    def vjp(g):
        ga = _unbroadcast(grad_a(g, a.data, b.data, out), sa) if a.on_tape else None
        gb = _unbroadcast(grad_b(g, a.data, b.data, out), sb) if b.on_tape else None
        return ga, gb

    return _record(out, (a, b), vjp)


# -- elementwise --------------------------------------------------------------

def add(a, b) -> Tensor:
    return _binary(a, b, np.add, lambda g, x, y, o: g, lambda g, x, y, o: g)


def sub(a, b) -> Tensor:
    return _binary(a, b, np.subtract, lambda g, x, y, o: g, lambda g, x, y, o: -g)


def mul(a, b) -> Tensor:
    return _binary(a, b, np.multiply, lambda g, x, y, o: g * y, lambda g, x, y, o: g * x)


def div(a, b) -> Tensor:
    return _binary(
        a, b, np.divide,
        lambda g, x, y, o: g / y,
        lambda g, x, y, o: -g * o / y,
    )


def scale(t, k: float) -> Tensor:
    t = constant(t)
    k = float(k)
    return _record(t.data * k, (t,), lambda g: (g * k,))


def neg(t) -> Tensor:
    return scale(t, -1.0)


def relu(t) -> Tensor:
    t = constant(t)
    mask = t.data > 0
    return _record(np.where(mask, t.data, 0.0), (t,), lambda g: (g * mask,))


def exp(t) -> Tensor:
    t = constant(t)
    out = np.exp(t.data)
    return _record(out, (t,), lambda g: (g * out,))


def log(t) -> Tensor:
    t = constant(t)
    x = t.data
    return _record(np.log(x), (t,), lambda g: (g / x,))


def sqrt(t) -> Tensor:
    t = constant(t)
    out = np.sqrt(t.data)
    return _record(out, (t,), lambda g: (g * 0.5 / out,))


def absolute(t) -> Tensor:
    """|t| with subgradient 0 at exactly 0."""
    t = constant(t)
    sign = np.sign(t.data)
    return _record(np.abs(t.data), (t,), lambda g: (g * sign,))


def stop_gradient(t) -> Tensor:
    """Same values, recorded as a constant."""
    return Tensor(constant(t).data)


# -- reductions and structural ops --------------------------------------------

def sum(t, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    t = constant(t)
    shape = t.shape
    out = t.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(out, (t,), vjp)


def mean(t, axis: int | None = None, keepdims: bool = False) -> Tensor:
    t = constant(t)
    n = t.size if axis is None else t.shape[axis]
    return scale(sum(t, axis=axis, keepdims=keepdims), 1.0 / n)


def gather_rows(t, index: Sequence[int]) -> Tensor:
    """Rows ``t[index]``; repeated indices accumulate in the gradient."""
    t = constant(t)
    idx = np.asarray(index, dtype=np.intp)
    if t.data.ndim != 2:
        raise DimensionError(f"gather_rows needs a matrix, got shape {t.shape}")
    if idx.size and (idx.min() < -t.shape[0] or idx.max() >= t.shape[0]):
        raise IndexError(f"row index out of range for shape {t.shape}")
    shape = t.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _record(t.data[idx], (t,), vjp)


def transpose(t) -> Tensor:
    t = constant(t)
    return _record(t.data.T, (t,), lambda g: (g.T,))


def matmul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    x, y = a.data, b.data

    def vjp(g):
        return (g @ y.T if a.on_tape else None, x.T @ g if b.on_tape else None)

    return _record(x @ y, (a, b), vjp)


def l2_normalize_rows(t, eps: float = 1e-12) -> Tensor:
    """Divide each row by ``max(||row||, eps)``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    t = constant(t)
    x = t.data
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))[:, None]
    live = norms >= eps
    denom = np.where(live, norms, eps)
    out = x / denom

    def vjp(g):
        proj = np.einsum("ij,ij->i", out, g)[:, None]
        return (np.where(live, g - out * proj, g) / denom,)

    return _record(out, (t,), vjp)


def l2_normalize_cols(t, eps: float = 1e-12) -> Tensor:
    return transpose(l2_normalize_rows(transpose(t), eps))


def log_sum_exp_rows(t) -> Tensor:
    """Max-shifted log-sum-exp of each row, shape (m, 1)."""
    t = constant(t)
    x = t.data
    if x.ndim != 2 or x.shape[1] < 1:
        raise DimensionError(f"log_sum_exp_rows needs an (m, n>=1) matrix, got {t.shape}")
    top = x.argmax(axis=1)
    rows = np.arange(x.shape[0])
    peak = x[rows, top][:, None]
    z = np.exp(x - peak)
    # log1p of everything except the (exactly 1) peak term keeps full
    # relative precision when the result is close to the row max
    z_rest = z.copy()
    z_rest[rows, top] = 0.0
    rest = z_rest.sum(axis=1, keepdims=True)
    out = peak + np.log1p(rest)
    soft = z / (1.0 + rest)
    return _record(out, (t,), lambda g: (g * soft,))


# -- finite differences -------------------------------------------------------

@dataclass(frozen=True)
class GradCheckResult:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_errors: np.ndarray

    @property
    def max_rel_error(self) -> float:
        return float(self.rel_errors.max()) if self.rel_errors.size else 0.0


def numeric_gradient(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function, one coordinate at a time."""
    if h <= 0:
        raise ValueError("h must be positive")
    base = np.array(constant(x).data, dtype=np.float64)
    grad = np.empty_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(Tensor(base)).item()
        flat[i] = orig - h
        down = f(Tensor(base)).item()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def finite_diff_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> GradCheckResult:
    """Compare the tape gradient of ``f`` at ``x`` with central differences.

    Relative error per element is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    tape = GradientTape()
    xt = tape.watch(constant(x).data)
    out = f(xt)
    analytic = backward(tape, out).get(xt.node, np.zeros(xt.shape))
    numeric = numeric_gradient(f, x, h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return GradCheckResult(analytic, numeric, np.abs(analytic - numeric) / denom)
