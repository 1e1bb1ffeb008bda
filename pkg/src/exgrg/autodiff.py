"""Tape-based reverse-mode differentiation over 2-D float64 arrays.

Every value is a ``rows x cols`` matrix; scalars are ``1 x 1``.  An op whose
inputs include at least one on-tape tensor records a node on that tape; ops on
constants return constants.  Nodes are appended in creation order, so the tape
is already topologically sorted and ``backward`` is a single reverse sweep.

Broadcasting is limited to row vectors ``(1, c)``, column vectors ``(r, 1)``
and scalars ``(1, 1)`` against a full matrix.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("value", "tape", "node_id", "name")

    def __init__(self, value, tape: "Tape | None" = None, node_id: int | None = None, name: str | None = None):
        arr = np.asarray(value, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got shape {arr.shape}")
        self.value = arr
        self.tape = tape
        self.node_id = node_id
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def on_tape(self) -> bool:
        return self.tape is not None

    def item(self) -> float:
        if self.value.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.value[0, 0])

    def numpy(self) -> np.ndarray:
        return self.value.copy()

    def __repr__(self) -> str:
        where = f"node={self.node_id}" if self.on_tape else "const"
        return f"Tensor(shape={self.shape}, {where})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


class _Node:
    __slots__ = ("parents", "vjp", "needs", "shape")

    def __init__(self, parents, vjp, needs, shape):
        self.parents = parents
        self.vjp = vjp
        self.needs = needs
        self.shape = shape


class Tape:
    """Ordered record of operations; single writer."""

    def __init__(self):
        self._nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def parameter(self, value, name: str | None = None) -> Tensor:
        """Register a leaf whose gradient ``backward`` will report."""
        arr = np.array(value, dtype=np.float64, copy=True)
        t = Tensor(arr, tape=self, name=name)
        t.node_id = len(self._nodes)
        self._nodes.append(_Node((), None, (), t.shape))
        return t

    def record(self, value: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
        parents = tuple(x.node_id if x.tape is self else None for x in inputs)
        needs = tuple(p is not None for p in parents)
        t = Tensor(value, tape=self)
        t.node_id = len(self._nodes)
        self._nodes.append(_Node(parents, vjp, needs, t.shape))
        return t

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Gradients of ``loss`` for every leaf on the tape.

        Leaves not reached (for example behind a stop-gradient) get exact zeros.
        The tape is not consumed; repeated calls give identical results.
        """
        if loss.shape != (1, 1):
            raise ShapeError(f"loss must be 1x1, got {loss.shape}")
        if loss.tape is not self:
            raise ValueError("loss is not recorded on this tape")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones((1, 1))}
        for nid in range(loss.node_id, -1, -1):
            node = self._nodes[nid]
            g = grads.get(nid)
            if g is None or node.vjp is None:
                continue
            pgrads = node.vjp(g, node.needs)
            for pid, pg in zip(node.parents, pgrads):
                if pid is None or pg is None:
                    continue
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg
        out = {}
        for nid, node in enumerate(self._nodes):
            if not node.parents and node.vjp is None:
                out[nid] = grads.get(nid, np.zeros(node.shape))
        return out

    def gradients(self, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
        grads = self.backward(loss)
        return [grads[p.node_id] for p in params]


def constant(value) -> Tensor:
    return Tensor(value)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(inputs: Sequence[Tensor]) -> "Tape | None":
    tape = None
    for x in inputs:
        if x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise ValueError("inputs live on different tapes")
            tape = x.tape
    return tape


def _op(name: str, value: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{name} produced a non-finite value")
    tape = _tape_of(inputs)
    if tape is None:
        return Tensor(value)
    return tape.record(value, inputs, vjp)


def _broadcast_shape(a: tuple[int, int], b: tuple[int, int], op: str) -> tuple[int, int]:
    out = []
    for da, db in zip(a, b):
        if da == db or db == 1:
            out.append(da)
        elif da == 1:
            out.append(db)
        else:
            raise ShapeError(f"{op}: cannot broadcast {a} with {b}")
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


# ---------------------------------------------------------------- primitives


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value

    def vjp(g, needs):
        return (g @ bv.T if needs[0] else None, av.T @ g if needs[1] else None)

    return _op("matmul", av @ bv, (a, b), vjp)


def sparse_dense_matmul(s, x) -> Tensor:
    """Constant sparse (or dense ndarray) matrix times a tensor."""
    x = as_tensor(x)
    if s.shape[1] != x.shape[0]:
        raise ShapeError(f"sparse_dense_matmul: {s.shape} @ {x.shape}")
    out = s @ x.value
    out = np.asarray(out)
    st = s.T

    def vjp(g, needs):
        return (np.asarray(st @ g),)

    return _op("sparse_dense_matmul", out, (x,), vjp)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape

    def vjp(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None, _unbroadcast(g, sb) if needs[1] else None)

    return _op("add", a.value + b.value, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape

    def vjp(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None, _unbroadcast(-g, sb) if needs[1] else None)

    return _op("sub", a.value - b.value, (a, b), vjp)


def mul(a, b) -> Tensor:
    """Elementwise product with row/column/scalar broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "mul")
    av, bv = a.value, b.value

    def vjp(g, needs):
        return (
            _unbroadcast(g * bv, av.shape) if needs[0] else None,
            _unbroadcast(g * av, bv.shape) if needs[1] else None,
        )

    return _op("mul", av * bv, (a, b), vjp)


elementwise_mul = mul


def scalar_mul(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _op("scalar_mul", x.value * c, (x,), lambda g, needs: (g * c,))


def transpose(x) -> Tensor:
    x = as_tensor(x)
    return _op("transpose", x.value.T.copy(), (x,), lambda g, needs: (g.T,))


def reshape(x, shape: tuple[int, int]) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _op("reshape", x.value.reshape(shape), (x,), lambda g, needs: (g.reshape(old),))


def take_rows(x, index) -> Tensor:
    x = as_tensor(x)
    idx = np.asarray(index, dtype=np.int64)
    rows = x.shape[0]

    def vjp(g, needs):
        out = np.zeros((rows, g.shape[1]))
        np.add.at(out, idx, g)
        return (out,)

    return _op("take_rows", x.value[idx], (x,), vjp)


def row_softmax(x, temperature: float = 1.0) -> Tensor:
    x = as_tensor(x)
    t = float(temperature)
    logits = x.value / t
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    y = e / e.sum(axis=1, keepdims=True)

    def vjp(g, needs):
        return ((y * (g - (g * y).sum(axis=1, keepdims=True))) / t,)

    return _op("row_softmax", y, (x,), vjp)


def log_row_softmax(x, temperature: float = 1.0) -> Tensor:
    x = as_tensor(x)
    t = float(temperature)
    logits = x.value / t
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    y = shifted - lse
    soft = np.exp(y)

    def vjp(g, needs):
        return ((g - soft * g.sum(axis=1, keepdims=True)) / t,)

    return _op("log_row_softmax", y, (x,), vjp)


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        y = np.exp(x.value)
    return _op("exp", y, (x,), lambda g, needs: (g * y,))


def log(x) -> Tensor:
    x = as_tensor(x)
    xv = x.value
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(xv)
    return _op("log", y, (x,), lambda g, needs: (g / xv,))


def sum(x, axis: int | None = None) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    shape = x.shape
    if axis is None:
        y = np.array([[x.value.sum()]])
    else:
        y = x.value.sum(axis=axis, keepdims=True)

    def vjp(g, needs):
        return (np.broadcast_to(g, shape).copy(),)

    return _op("sum", y, (x,), vjp)


def mean(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    n = x.value.size if axis is None else x.shape[axis]
    return scalar_mul(sum(x, axis), 1.0 / n)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.value > 0
    return _op("relu", np.where(mask, x.value, 0.0), (x,), lambda g, needs: (g * mask,))


def prelu(x, slope) -> Tensor:
    """Leaky ReLU with a learnable ``1 x 1`` slope."""
    x, slope = as_tensor(x), as_tensor(slope)
    if slope.shape != (1, 1):
        raise ShapeError(f"prelu slope must be 1x1, got {slope.shape}")
    xv = x.value
    a = slope.value[0, 0]
    pos = xv > 0
    y = np.where(pos, xv, a * xv)

    def vjp(g, needs):
        gx = g * np.where(pos, 1.0, a) if needs[0] else None
        ga = np.array([[np.sum(g * np.where(pos, 0.0, xv))]]) if needs[1] else None
        return gx, ga

    return _op("prelu", y, (x, slope), vjp)


def elu(x, alpha: float = 1.0) -> Tensor:
    x = as_tensor(x)
    xv = x.value
    pos = xv > 0
    neg_part = alpha * np.expm1(np.minimum(xv, 0.0))
    y = np.where(pos, xv, neg_part)
    return _op("elu", y, (x,), lambda g, needs: (g * np.where(pos, 1.0, neg_part + alpha),))


def identity(x) -> Tensor:
    return as_tensor(x)


def l2_normalize_rows(x, eps: float = 1e-12) -> Tensor:
    x = as_tensor(x)
    norms = np.sqrt((x.value**2).sum(axis=1, keepdims=True))
    safe = np.maximum(norms, eps)
    y = x.value / safe
    active = norms > eps

    def vjp(g, needs):
        radial = (g * y).sum(axis=1, keepdims=True)
        return ((g - np.where(active, y * radial, 0.0)) / safe,)

    return _op("l2_normalize_rows", y, (x,), vjp)


def batch_norm(x, eps: float = 1e-5) -> Tensor:
    """Column standardization with batch statistics (1/N variance), no affine."""
    x = as_tensor(x)
    n = x.shape[0]
    mu = x.value.mean(axis=0, keepdims=True)
    centered = x.value - mu
    var = (centered**2).mean(axis=0, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std

    def vjp(g, needs):
        gsum = g.sum(axis=0, keepdims=True)
        gxsum = (g * xhat).sum(axis=0, keepdims=True)
        return ((inv_std / n) * (n * g - gsum - xhat * gxsum),)

    return _op("batch_norm", xhat, (x,), vjp)


def hinge(x, threshold: float = 1.0) -> Tensor:
    """``max(0, threshold - x)`` elementwise."""
    x = as_tensor(x)
    active = x.value < threshold
    y = np.where(active, threshold - x.value, 0.0)
    return _op("hinge", y, (x,), lambda g, needs: (-g * active,))


def square(x) -> Tensor:
    x = as_tensor(x)
    xv = x.value
    return _op("square", xv * xv, (x,), lambda g, needs: (2.0 * xv * g,))


def sqrt(x, eps: float = 1e-4) -> Tensor:
    """``sqrt(x + eps)``; the additive epsilon keeps the derivative bounded."""
    x = as_tensor(x)
    with np.errstate(invalid="ignore"):
        y = np.sqrt(x.value + eps)
    return _op("sqrt", y, (x,), lambda g, needs: (g / (2.0 * y),))


def stop_gradient(x) -> Tensor:
    """Forward identity that cuts the tape: the result is a constant."""
    x = as_tensor(x)
    return Tensor(x.value)


ACTIVATIONS: dict[str, Callable] = {
    "relu": relu,
    "elu": elu,
    "identity": identity,
    "none": identity,
}


# ------------------------------------------------------------------- checking


def finite_diff_check(
    f: Callable[[list[Tensor]], Tensor], params: Sequence, eps: float = 1e-5, floor: float | None = None
) -> float:
    """Max relative error between ``backward`` and central differences.

    ``f`` maps a list of tensors to a ``1 x 1`` tensor; it is evaluated once on
    a fresh tape and then on constant perturbed copies, coordinate by
    coordinate.  The error is ``|a - n| / max(|a| + |n|, floor)``.  The floor
    defaults to ``1e-6 * max(1, |f|)``, well above the ``~1e-16 |f| / eps``
    round-off of a central difference, so true zeros do not read as 100% error.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = [np.array(as_tensor(p).value, dtype=np.float64) for p in params]
    tape = Tape()
    leaves = [tape.parameter(b) for b in base]
    loss = f(leaves)
    if not np.isfinite(loss.value).all():
        raise NonFiniteError("f is not finite at the base point")
    if loss.tape is None:
        analytic = [np.zeros_like(b) for b in base]
    else:
        analytic = tape.gradients(loss, leaves)
    if floor is None:
        floor = 1e-6 * max(1.0, abs(loss.item()))

    worst = 0.0
    for k, b in enumerate(base):
        for idx in np.ndindex(b.shape):
            plus = [x.copy() for x in base]
            minus = [x.copy() for x in base]
            plus[k][idx] += eps
            minus[k][idx] -= eps
            fp = f([Tensor(x) for x in plus]).item()
            fm = f([Tensor(x) for x in minus]).item()
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"f is not finite near parameter {k} index {idx}")
            numeric = (fp - fm) / (2.0 * eps)
            a = analytic[k][idx]
            err = abs(a - numeric) / max(floor, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst
