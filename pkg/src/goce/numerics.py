"""Dense float64 tensors with a reverse-mode gradient tape.

Every op is a plain function taking and returning :class:`Tensor`. When any
input requires a gradient the output remembers its parents and a local
backward rule; :func:`backward` replays those rules in reverse creation order.
Broadcasting is limited to scalar scaling, row-wise bias and row scaling.
"""

from __future__ import annotations

import itertools
import os
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit

DEBUG = os.environ.get("GOCE_DEBUG", "") not in ("", "0")

_node_ids = itertools.count()
_local = threading.local()


class ShapeError(ValueError):
    pass


class DegenerateRowError(ValueError):
    pass


class SupportError(ValueError):
    pass


class RankError(ValueError):
    pass


def grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording in the current thread."""
    prev = grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "node_id", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.node_id = next(_node_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __truediv__(self, c: float):
        return scale(self, 1.0 / c)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if DEBUG and not np.all(np.isfinite(out.data)):
        if all(np.all(np.isfinite(p.data)) for p in parents):
            raise FloatingPointError("non-finite output from finite inputs")
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _make(a.data + float(c), (a,), lambda g: (g,))


def add_const(a: Tensor, const: np.ndarray) -> Tensor:
    """Add a constant array of the same shape (e.g. a {0, -inf} mask)."""
    const = np.asarray(const, dtype=np.float64)
    if const.shape != a.shape:
        raise ShapeError(f"add_const: shapes {a.shape} and {const.shape} differ")
    return _make(a.data + const, (a,), lambda g: (g,))


def sigmoid(a: Tensor) -> Tensor:
    s = expit(a.data)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _make(t, (a,), lambda g: (g * (1.0 - t * t),))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _make(e, (a,), lambda g: (g * e,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def absolute(a: Tensor) -> Tensor:
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def clamp(a: Tensor, lo: float, hi: float, straight_through: bool = True) -> Tensor:
    """Clip to [lo, hi]. With ``straight_through`` the gradient passes unchanged."""
    out = np.clip(a.data, lo, hi)
    if straight_through:
        return _make(out, (a,), lambda g: (g,))
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(out, (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# linear algebra and shape plumbing
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Row-wise bias: x[m, n] + b[n]."""
    if x.ndim != 2 or b.shape != (x.shape[1],):
        raise ShapeError(f"add_bias: bias {b.shape} does not fit rows of {x.shape}")
    return _make(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)))


def scale_rows(x: Tensor, v: Tensor) -> Tensor:
    """Multiply row i of x[m, n] by v[i]."""
    if x.ndim != 2 or v.shape != (x.shape[0],):
        raise ShapeError(f"scale_rows: scale {v.shape} does not fit rows of {x.shape}")
    col = v.data[:, None]
    return _make(x.data * col, (x, v), lambda g: (g * col, (g * x.data).sum(axis=1)))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D, got {a.shape}")
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)

    def bw(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, idx, g)
        return (grad,)

    return _make(out.copy(), (a,), bw)


def scatter(values: Tensor, idx, shape: Sequence[int], fill: float = 0.0) -> Tensor:
    """Place ``values`` at ``idx`` inside a constant array of ``shape``."""
    out = np.full(tuple(shape), fill, dtype=np.float64)
    out[idx] = values.data
    return _make(out, (values,), lambda g: (np.asarray(g[idx]).reshape(values.shape),))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat: nothing to concatenate")
    data = np.concatenate([p.data for p in parts], axis=axis)
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(data, tuple(parts), bw)


def overwrite_rows(x: Tensor, rows: Sequence[int], values: np.ndarray) -> Tensor:
    """Replace rows of x with constant values; no gradient reaches replaced rows."""
    rows = np.asarray(list(rows), dtype=np.intp)
    values = np.asarray(values, dtype=np.float64).reshape(len(rows), x.shape[1])
    out = x.data.copy()
    out[rows] = values
    keep = np.ones(x.shape[0], dtype=bool)
    keep[rows] = False

    def bw(g):
        return (g * keep[:, None],)

    return _make(out, (x,), bw)


# ---------------------------------------------------------------------------
# reductions and distributions
# ---------------------------------------------------------------------------


def total(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        n = a.data.size
        shape = a.shape
        return _make(np.asarray(a.data.mean()), (a,), lambda g: (np.full(shape, float(g) / n),))
    n = a.shape[axis]
    return _make(a.data.mean(axis=axis), (a,), lambda g: (np.repeat(np.expand_dims(g, axis), n, axis=axis) / n,))


def _row_max(x: np.ndarray) -> np.ndarray:
    if x.ndim != 2:
        raise ShapeError(f"expected 2-D rows, got {x.shape}")
    m = x.max(axis=1, keepdims=True)
    if np.any(np.isneginf(m)):
        bad = int(np.flatnonzero(np.isneginf(m[:, 0]))[0])
        raise DegenerateRowError(f"row {bad} is entirely -inf")
    return m


def softmax_rows(x: Tensor) -> Tensor:
    """Row softmax with max-subtraction; -inf entries map to exactly 0."""
    e = np.exp(x.data - _row_max(x.data))
    y = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _make(y, (x,), bw)


def log_softmax_rows(x: Tensor) -> Tensor:
    shifted = x.data - _row_max(x.data)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    y = np.exp(out)

    def bw(g):
        return (g - y * g.sum(axis=1, keepdims=True),)

    return _make(out, (x,), bw)


def kl_divergence_rows(p: Tensor, q: Tensor) -> Tensor:
    """Mean over rows of sum p*ln(p/q) with 0*ln0 := 0."""
    _same_shape(p, q, "kl_divergence_rows")
    pd, qd = p.data, q.data
    live = pd > 0
    if np.any(live & (qd <= 0)):
        raise SupportError("q vanishes where p has mass")
    ratio = np.ones_like(pd)
    np.divide(pd, qd, out=ratio, where=live)
    logr = np.log(ratio)
    rows = pd.shape[0]
    value = np.where(live, pd * logr, 0.0).sum() / rows

    def bw(g):
        scale_ = float(g) / rows
        dp = np.where(live, logr + 1.0, 0.0) * scale_
        dq = np.zeros_like(qd)
        np.divide(-pd, qd, out=dq, where=live)
        return dp, dq * scale_

    return _make(np.asarray(value), (p, q), bw)



def kl_logits_rows(x: Tensor, y: Tensor) -> Tensor:
    """Mean over rows of KL(softmax(x) || softmax(y)), computed in log space.

    Stays finite when softmax(y) underflows on entries where softmax(x) has
    mass. Both inputs must share their -inf pattern.
    """
    _same_shape(x, y, "kl_logits_rows")
    live = np.isfinite(x.data)
    if not np.array_equal(live, np.isfinite(y.data)):
        raise SupportError("score rows have different masks")
    zx = np.where(live, x.data - _row_max(x.data), -np.inf)
    zy = np.where(live, y.data - _row_max(y.data), -np.inf)
    lp = zx - np.log(np.exp(zx).sum(axis=1, keepdims=True))
    lq = zy - np.log(np.exp(zy).sum(axis=1, keepdims=True))
    p, q = np.exp(lp), np.exp(lq)
    r = np.where(live, lp, 0.0) - np.where(live, lq, 0.0)
    per_row = (p * r).sum(axis=1, keepdims=True)
    rows = x.shape[0]

    def bw(g):
        scale_ = float(g) / rows
        return p * (r - per_row) * scale_, (q - p) * scale_

    return _make(np.asarray(per_row.sum() / rows), (x, y), bw)

# ---------------------------------------------------------------------------
# tape and backward pass
# ---------------------------------------------------------------------------


class Tape:
    """Recorded operations reachable from one output, in creation order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        seen: dict[int, Tensor] = {}
        stack = [out]
        while stack:
            t = stack.pop()
            if t.node_id in seen:
                continue
            seen[t.node_id] = t
            stack.extend(t._parents)
        ordered = sorted(seen.values(), key=lambda t: t.node_id)
        return cls([t for t in ordered if t._backward is not None])

    def __len__(self) -> int:
        return len(self.nodes)

    def leaves(self) -> list[Tensor]:
        found: dict[int, Tensor] = {}
        for node in self.nodes:
            for p in node._parents:
                if p._backward is None and p.requires_grad:
                    found[p.node_id] = p
        return [found[k] for k in sorted(found)]


def backward(loss: Tensor, wrt: Mapping[str, Tensor] | None = None) -> dict[str, np.ndarray]:
    """Reverse-mode pass from a scalar loss.

    Returns a gradient per entry of ``wrt`` (or per named leaf reached when
    ``wrt`` is omitted). Leaves the loss does not depend on get zeros.
    """
    if loss.data.size != 1:
        raise RankError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = Tape.from_output(loss)
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.node_id in grads:
                grads[parent.node_id] = grads[parent.node_id] + pg
            else:
                grads[parent.node_id] = np.asarray(pg, dtype=np.float64)
    if wrt is None:
        wrt = {leaf.name: leaf for leaf in tape.leaves() if leaf.name is not None}
    out: dict[str, np.ndarray] = {}
    for name, leaf in wrt.items():
        if leaf.node_id == loss.node_id:
            g = np.ones_like(leaf.data)
        else:
            g = grads.get(leaf.node_id)
            if g is None:
                g = np.zeros_like(leaf.data)
        leaf.grad = g
        out[name] = g
    return out


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------


def numerical_gradient(f: Callable[[list[np.ndarray]], float], inputs: list[np.ndarray], h: float = 1e-5) -> list[np.ndarray]:
    """Central differences of a scalar function of several arrays."""
    grads = []
    for arr in inputs:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            ix = it.multi_index
            orig = arr[ix]
            arr[ix] = orig + h
            fp = f(inputs)
            arr[ix] = orig - h
            fm = f(inputs)
            arr[ix] = orig
            g[ix] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    num = np.linalg.norm((a - b).ravel())
    den = max(np.linalg.norm(a.ravel()) + np.linalg.norm(b.ravel()), 1e-12)
    return float(num / den)


def gradcheck(fn: Callable[..., Tensor], inputs: Iterable[np.ndarray], h: float = 1e-5) -> float:
    """Worst relative error between tape and central-difference gradients.

    ``fn`` maps Tensors to a scalar Tensor; inputs are copied, not mutated.
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    leaves = {str(i): Tensor(a.copy(), requires_grad=True) for i, a in enumerate(arrays)}
    analytic = backward(fn(*leaves.values()), leaves)

    def scalar(arrs):
        with no_grad():
            return fn(*[Tensor(a) for a in arrs]).item()

    numeric = numerical_gradient(scalar, arrays, h)
    return max(relative_error(analytic[str(i)], numeric[i]) for i in range(len(arrays)))
