"""Minimal dense tensor with reverse-mode automatic differentiation.

Only the primitives needed by the models in this package are provided:
affine maps, matrix products, elementwise ReLU/sqrt/power/clamp/sign,
softmax cross-entropy with integer labels, reductions, l2 normalization and
scalar arithmetic.  There is no broadcasting beyond tensor-scalar.

Storage is float32 by default.  Operations preserve the dtype of their
inputs, so a float64 input produces a float64 graph; ``grad_check`` relies on
that to run its finite-difference oracle in double precision.

Each tensor gets a monotonically increasing id at creation.  A node's inputs
always exist before the node itself, so sorting the reachable nodes by id is
a valid topological order for the backward pass.
"""

from __future__ import annotations

import itertools
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import LabelError, ShapeError, ZeroVectorError

_ids = itertools.count()


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """A node in the differentiation graph.

    Leaves are created by the user; interior nodes are created by the
    primitives in this module and remember their inputs and a closure that
    maps the output gradient to input gradients.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "_backward", "id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def backward(self) -> None:
        backward(self)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ShapeError("div", self.shape, other.shape, detail="only tensor / scalar is supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _record(out_data: np.ndarray, op: str, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(out_data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out.parents = tuple(parents)
        out._backward = backward_fn
    return out


def _ensure(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    a = _ensure(a)
    if _is_scalar(b):
        return _record(a.data + b, "add_scalar", (a,), lambda g: (g,))
    b = _ensure(b)
    _same_shape("add", a, b)
    return _record(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a = _ensure(a)
    if _is_scalar(b):
        return _record(a.data - b, "sub_scalar", (a,), lambda g: (g,))
    b = _ensure(b)
    _same_shape("sub", a, b)
    return _record(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def neg(a) -> Tensor:
    a = _ensure(a)
    return _record(-a.data, "neg", (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = _ensure(a)
    if _is_scalar(b):
        return _record(a.data * b, "mul_scalar", (a,), lambda g: (g * b,))
    b = _ensure(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _record(ad * bd, "mul", (a, b), lambda g: (g * bd, g * ad))


def matmul(a, b) -> Tensor:
    a, b = _ensure(a), _ensure(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _record(ad @ bd, "matmul", (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(a) -> Tensor:
    a = _ensure(a)
    if a.data.ndim != 2:
        raise ShapeError("transpose", a.shape, detail="expected a matrix")
    return _record(a.data.T, "transpose", (a,), lambda g: (g.T,))


def affine(x, weight, bias) -> Tensor:
    """``x @ weight + bias`` with ``x: [n, k]``, ``weight: [k, m]``, ``bias: [m]``."""
    x, weight, bias = _ensure(x), _ensure(weight), _ensure(bias)
    if (
        x.data.ndim != 2
        or weight.data.ndim != 2
        or bias.data.ndim != 1
        or x.shape[1] != weight.shape[0]
        or weight.shape[1] != bias.shape[0]
    ):
        raise ShapeError("affine", x.shape, weight.shape, bias.shape)
    xd, wd = x.data, weight.data

    def back(g):
        return g @ wd.T, xd.T @ g, g.sum(axis=0)

    return _record(xd @ wd + bias.data, "affine", (x, weight, bias), back)


# --------------------------------------------------------------- elementwise


def relu(x) -> Tensor:
    x = _ensure(x)
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0).astype(x.dtype), "relu", (x,), lambda g: (g * mask,))


def sqrt(x) -> Tensor:
    """Square root of ``max(x, 0)``; the gradient is 0 wherever ``x <= 0``."""
    x = _ensure(x)
    pos = x.data > 0
    out = np.sqrt(np.where(pos, x.data, 0)).astype(x.dtype)

    def back(g):
        safe = np.where(pos, out, 1)
        return (np.where(pos, g * 0.5 / safe, 0).astype(g.dtype),)

    return _record(out, "sqrt", (x,), back)


def power(x, exponent: float) -> Tensor:
    """``max(x, 0) ** exponent`` for ``exponent > 0``; gradient 0 wherever ``x <= 0``."""
    if exponent == 0.5:
        return sqrt(x)
    if not exponent > 0:
        raise ValueError(f"power: exponent must be positive, got {exponent}")
    x = _ensure(x)
    pos = x.data > 0
    base = np.where(pos, x.data, 0).astype(x.dtype)
    out = (base**exponent).astype(x.dtype)
    if exponent == 1:
        return _record(out, "power", (x,), lambda g: (g * pos,))

    def back(g):
        safe = np.where(pos, base, 1)
        return (np.where(pos, g * exponent * safe ** (exponent - 1), 0).astype(g.dtype),)

    return _record(out, "power", (x,), back)


def clamp(x, lo: float, hi: float) -> Tensor:
    x = _ensure(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _record(np.clip(x.data, lo, hi), "clamp", (x,), lambda g: (g * inside,))


def sign(x) -> Tensor:
    """Elementwise sign.  Never part of a differentiated path."""
    return Tensor(np.sign(_as_array(x)))


# ---------------------------------------------------------------- reductions


def sum(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = _ensure(x)
    shape, dtype = x.shape, x.dtype
    return _record(np.asarray(x.data.sum(), dtype=dtype), "sum", (x,), lambda g: (np.broadcast_to(g, shape).astype(dtype),))


def mean(x) -> Tensor:
    x = _ensure(x)
    shape, dtype, n = x.shape, x.dtype, x.size

    def back(g):
        return (np.broadcast_to(g / n, shape).astype(dtype),)

    return _record(np.asarray(x.data.mean(), dtype=dtype), "mean", (x,), back)


def l2_normalize(x) -> Tensor:
    """Divide every row (last axis) by its Euclidean norm.

    Raises ``ZeroVectorError`` for an exactly-zero row instead of silently
    adding an epsilon.
    """
    x = _ensure(x)
    norms = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    zero = norms[..., 0] == 0
    if np.any(zero):
        rows = np.flatnonzero(zero).tolist()
        raise ZeroVectorError(f"l2_normalize: zero vector at row(s) {rows[:10]}")
    out = x.data / norms

    def back(g):
        proj = (out * g).sum(axis=-1, keepdims=True)
        return ((g - out * proj) / norms,)

    return _record(out, "l2_normalize", (x,), back)


def softmax_cross_entropy(logits, labels, reduction: str = "mean") -> Tensor:
    """Cross-entropy of softmax(logits) against integer labels.

    ``reduction="none"`` returns the per-sample losses, otherwise the batch mean.
    """
    logits = _ensure(logits)
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise ShapeError("softmax_cross_entropy", logits.shape, detail="expected [batch, classes]")
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError("softmax_cross_entropy", logits.shape, labels.shape)
    if not np.issubdtype(labels.dtype, np.integer):
        raise LabelError(f"softmax_cross_entropy: labels must be integers, got {labels.dtype}")
    if n and (labels.min() < 0 or labels.max() >= c):
        bad = labels[(labels < 0) | (labels >= c)]
        raise LabelError(f"softmax_cross_entropy: label {int(bad[0])} outside [0, {c})")
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=1, keepdims=True)
    rows = np.arange(n)
    losses = (np.log(total[:, 0]) - shifted[rows, labels]).astype(z.dtype)
    probs = exp / total

    def grad_from(per_sample: np.ndarray) -> np.ndarray:
        d = probs.copy()
        d[rows, labels] -= 1
        return (d * per_sample[:, None]).astype(z.dtype)

    if reduction == "none":
        return _record(losses, "cross_entropy", (logits,), lambda g: (grad_from(g),))
    if reduction != "mean":
        raise ValueError(f"unknown reduction {reduction!r}")
    value = np.asarray(losses.mean(), dtype=z.dtype)
    return _record(value, "cross_entropy_mean", (logits,), lambda g: (grad_from(np.full(n, g / n, dtype=z.dtype)),))


# ------------------------------------------------------------------ backward


def backward(loss: Tensor) -> None:
    """Accumulate ``d loss / d leaf`` into ``.grad`` of every reachable leaf.

    Repeated calls without ``zero_grad`` accumulate, as in most frameworks.
    """
    if loss.size != 1:
        raise ShapeError("backward", loss.shape, detail="loss must be a scalar")
    if not loss.requires_grad:
        return

    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.id in nodes:
            continue
        nodes[t.id] = t
        stack.extend(p for p in t.parents if p.requires_grad)

    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for tid in sorted(nodes, reverse=True):
        t = nodes[tid]
        g = grads.pop(tid, None)
        if g is None:
            continue
        if t._backward is None:
            g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for parent, pg in zip(t.parents, t._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = pg


# ---------------------------------------------------------------- grad check


def numerical_grad(f: Callable[[Tensor], Tensor], x: np.ndarray, h: float, coords=None) -> np.ndarray:
    """Central finite differences of scalar ``f`` at ``x`` in float64.

    With ``coords`` (flat indices) only those entries are estimated; the
    result is then a 1-D array aligned with ``coords``.
    """
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    idx = np.arange(flat.size) if coords is None else np.asarray(coords, dtype=np.int64)
    out = np.empty(idx.size, dtype=np.float64)
    for j, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(Tensor(x)).data)
        flat[i] = orig - h
        fm = float(f(Tensor(x)).data)
        flat[i] = orig
        out[j] = (fp - fm) / (2 * h)
    return out.reshape(x.shape) if coords is None else out


def _is_kink(f, x: np.ndarray, i: int, h: float, tol: float, f0: float) -> bool:
    """Whether ``f`` is visibly non-smooth along flat coordinate ``i`` within ``[x - h, x + h]``.

    A smooth function gives central differences at steps ``h`` and ``h/2``
    that agree to O(h^2), and one-sided slope gaps that halve with the step.
    A kink breaks one of the two.
    """
    flat = x.reshape(-1)
    orig = flat[i]
    vals = {}
    for s in (-1.0, -0.5, 0.5, 1.0):
        flat[i] = orig + s * h
        vals[s] = float(f(Tensor(x)).data)
    flat[i] = orig
    c_full = (vals[1.0] - vals[-1.0]) / (2 * h)
    c_half = (vals[0.5] - vals[-0.5]) / h
    gap_full = (vals[1.0] - f0) / h - (f0 - vals[-1.0]) / h
    gap_half = (vals[0.5] - f0) / (h / 2) - (f0 - vals[-0.5]) / (h / 2)
    scale = max(1e-8, abs(c_full) + abs(c_half))
    slope_scale = max(1e-8, abs(vals[1.0] - f0) / h + abs(f0 - vals[-1.0]) / h)
    return abs(c_full - c_half) > tol * scale or abs(gap_full - 2 * gap_half) > tol * slope_scale


# errors this small pass without probing for kinks
_KINK_PROBE_FLOOR = 1e-6


def grad_check(
    f: Callable[[Tensor], Tensor],
    x,
    h: float = 1e-3,
    skip_kinks: bool = True,
    kink_tol: float = 1e-2,
    coords=None,
) -> float:
    """Max relative error between the analytic and central-difference gradient.

    ``f`` maps a Tensor to a scalar Tensor.  The check runs in float64: ``x``
    is promoted, and float32 constants inside ``f`` are promoted by numpy.
    The error per coordinate is ``|a - n| / max(1e-8, |a| + |n|)``.
    ``coords`` restricts the check to the given flat indices of ``x``.
    With ``skip_kinks``, a coordinate whose error exceeds 1e-6 is re-measured
    at steps ``h/10`` and ``h/100`` and keeps the smallest error: a wrong
    gradient is wrong at every step, a kink only spoils stencils that
    straddle it.  If the error is still large and ``f`` has a kink inside the
    smallest stencil, the coordinate is excluded; if every coordinate is
    excluded the result is 0.  A NaN anywhere is reported as ``inf``.
    """
    x64 = np.array(_as_array(x), dtype=np.float64)
    leaf = Tensor(x64, requires_grad=True)
    out = f(leaf)
    if out.size != 1:
        raise ShapeError("grad_check", out.shape, detail="f must be scalar-valued")
    backward(out)
    analytic = (leaf.grad if leaf.grad is not None else np.zeros_like(x64)).reshape(-1)
    idx = np.arange(x64.size) if coords is None else np.asarray(coords, dtype=np.int64).reshape(-1)
    analytic = analytic[idx]
    numeric = numerical_grad(f, x64, h, coords=idx)
    if not np.all(np.isfinite(numeric)) or not np.all(np.isfinite(analytic)):
        return float("inf")
    err = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    if skip_kinks:
        f0 = float(out.data)
        keep = np.ones(err.size, dtype=bool)
        for j in np.flatnonzero(err > _KINK_PROBE_FLOOR):
            step = h
            for step in (h / 10, h / 100):
                n = numerical_grad(f, x64, step, coords=idx[j : j + 1])[0]
                err[j] = min(err[j], abs(analytic[j] - n) / max(1e-8, abs(analytic[j]) + abs(n)))
                if err[j] <= _KINK_PROBE_FLOOR:
                    break
            if err[j] > _KINK_PROBE_FLOOR:
                keep[j] = not _is_kink(f, x64, int(idx[j]), step, kink_tol, f0)
        err = err[keep]
    return float(err.max()) if err.size else 0.0
