"""Dense numpy tensors with reverse-mode automatic differentiation.

Every operation the hierarchical model needs is defined here as a function
that returns a new :class:`Tensor` and, when gradients are being recorded,
a closure that pushes the output gradient back to its inputs. Calling
:meth:`Tensor.backward` on a scalar walks the recorded graph in reverse
topological order, summing gradients across fan-out.

Precision follows the input arrays: float32 for training, float64 for
gradient checks.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

MASK_VALUE = -1e9
_GELU_C = math.sqrt(2.0 / math.pi)

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for a primitive."""

    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        joined = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class NonFiniteError(FloatingPointError):
    """Raised when a computation produces NaN or inf."""

    def __init__(self, op: str, where: str = "forward"):
        self.op = op
        super().__init__(f"non-finite values produced by '{op}' ({where})")


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A numpy array plus an optional gradient slot and backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple[Tensor, ...] = (),
        _backward: Callable[[np.ndarray], None] | None = None,
        op: str = "leaf",
    ):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- gradient bookkeeping --------------------------------------------
    def zero_grad(self) -> None:
        self.grad = None

    def _accum(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if g.shape != self.data.shape:
            g = _unbroadcast(g, self.data.shape)
        g = g.astype(self.data.dtype, copy=False)
        # never in place: ``g`` may be shared with a sibling input
        self.grad = g if self.grad is None else self.grad + g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Backpropagate from this tensor through the recorded graph."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = topological_order(self)
        self._accum(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ---------------------------------------------------
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that require grad, parents before children."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward, op)
    return Tensor(data, op=op)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # python scalars adopt the other operand's dtype
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype if np.isscalar(b) else None))
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype if np.isscalar(a) else None)), b
    return as_tensor(a), as_tensor(b)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- elementwise arithmetic ----------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("add", a, b)

    def backward(g):
        a._accum(g)
        b._accum(g)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("sub", a, b)

    def backward(g):
        a._accum(g)
        b._accum(-g)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("mul", a, b)

    def backward(g):
        if a.requires_grad:
            a._accum(g * b.data)
        if b.requires_grad:
            b._accum(g * a.data)

    return _make(a.data * b.data, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    def backward(g):
        a._accum(g * c)

    return _make(a.data * c, (a,), backward, "scale")


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        a._accum(g * out * (1.0 - out))

    return _make(out, (a,), backward, "sigmoid")


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh form: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    x = a.data
    x2 = x * x
    inner = _GELU_C * x * (1.0 + 0.044715 * x2)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        a._accum(g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * dinner))

    return _make(out, (a,), backward, "gelu")


# -- shape manipulation ---------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None

    def backward(g):
        a._accum(g.reshape(a.shape))

    return _make(out, (a,), backward, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        a._accum(g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), backward, "transpose")


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        a._accum(full)

    return _make(out, (a,), backward, "getitem")


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """``a[index]`` along axis 0 for an index without repeats."""
    index = np.asarray(index)

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        a._accum(full)

    return _make(a.data[index], (a,), backward, "gather_rows")


def scatter_rows(a: Tensor, index: np.ndarray, num_rows: int) -> Tensor:
    """Place the rows of ``a`` at ``index`` in a zero array with ``num_rows`` rows."""
    index = np.asarray(index)
    out = np.zeros((num_rows,) + a.shape[1:], dtype=a.dtype)
    out[index] = a.data

    def backward(g):
        a._accum(g[index])

    return _make(out, (a,), backward, "scatter_rows")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in tensors)) from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, part in zip(tensors, np.split(g, sizes, axis=axis)):
            t._accum(part)

    return _make(out, tensors, backward, "concat")


# -- reductions -------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.shape))

    return _make(out, (a,), backward, "sum")


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(tsum(a, axis, keepdims), 1.0 / float(count))


# -- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def backward(g):
        if a.requires_grad:
            a._accum(np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            if a.ndim > 2 and b.ndim == 2:
                # fold the batch axes into one big GEMM
                ga = a.data.reshape(-1, a.shape[-1])
                b._accum(ga.T @ g.reshape(-1, g.shape[-1]))
            else:
                b._accum(np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _make(out, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = matmul(x, w)
    return out if b is None else add(out, b)


# -- attention pieces -----------------------------------------------------------

def masked_fill(a: Tensor, mask: np.ndarray, value: float = MASK_VALUE) -> Tensor:
    """Replace entries where ``mask`` is True by ``value``; no gradient flows there."""
    mask = np.asarray(mask, dtype=bool)
    try:
        out = np.where(mask, np.asarray(value, dtype=a.dtype), a.data)
    except ValueError:
        raise ShapeError("masked_fill", a.shape, mask.shape) from None

    def backward(g):
        a._accum(np.where(mask, 0, g))

    return _make(out, (a,), backward, "masked_fill")


def softmax(a: Tensor, keep: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.

    ``keep`` (broadcastable boolean) marks the entries allowed to receive
    weight; everything else is forced to exactly zero after normalisation,
    and a row with no allowed entries comes out all-zero.
    """
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    if keep is not None:
        e = e * keep
    s = e.sum(axis=-1, keepdims=True)
    out = e / np.where(s == 0, 1, s)

    def backward(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        a._accum(out * (g - dot))

    return _make(out, (a,), backward, "softmax")


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    d = x.shape[-1]

    def backward(g):
        if gamma.requires_grad:
            gamma._accum((g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            beta._accum(g.reshape(-1, d).sum(axis=0))
        if a.requires_grad:
            gx = g * gamma.data
            a._accum(
                inv
                * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            )

    return _make(out, (a, gamma, beta), backward, "layer_norm")


def dropout(a: Tensor, rate: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when not training or ``rate == 0``."""
    if not train or rate <= 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(a.shape) >= rate).astype(a.dtype) / (1.0 - rate)

    def backward(g):
        a._accum(g * keep)

    return _make(a.data * keep, (a,), backward, "dropout")


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError("embedding", weight.shape, (int(ids.max()) + 1,))
    out = weight.data[ids]

    def backward(g):
        flat = ids.reshape(-1)
        gw = np.zeros_like(weight.data)
        np.add.at(gw, flat, g.reshape(len(flat), -1))
        weight._accum(gw)

    return _make(out, (weight,), backward, "embedding")


def mean_over(a: Tensor, weights: np.ndarray) -> Tensor:
    """Weighted span mean: ``out[..., :] = sum_l weights[..., l] * a[..., l, :]``.

    ``weights`` is a constant (rows hold 1/len over a span, 0 elsewhere), so
    a row of zeros yields a zero vector.
    """
    w = np.asarray(weights, dtype=a.dtype)
    if w.shape != a.shape[:-1]:
        raise ShapeError("mean_over", a.shape, w.shape)
    out = np.matmul(w[..., None, :], a.data)[..., 0, :]

    def backward(g):
        a._accum(w[..., :, None] * g[..., None, :])

    return _make(out, (a,), backward, "mean_over")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of ``logits`` [B, C] against integer ``labels`` [B]."""
    labels = np.asarray(labels, dtype=np.int64)
    x = logits.data
    if x.ndim != 2 or labels.shape != (x.shape[0],):
        raise ShapeError("cross_entropy", x.shape, labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= x.shape[1]):
        raise ValueError(f"cross_entropy: label out of range for {x.shape[1]} classes")
    shifted = x - x.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    n = x.shape[0]
    loss = -logp[np.arange(n), labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        logits._accum(g * p / n)

    return _make(np.asarray(loss, dtype=x.dtype), (logits,), backward, "cross_entropy")


# -- finite-difference verification ---------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    checked: int
    per_param: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def first_non_finite(root: Tensor) -> str | None:
    """Name of the earliest op (topologically) whose output is not finite."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        stack.extend((p, False) for p in node._parents)
    for node in order:
        if not np.all(np.isfinite(node.data)):
            return node.op
    return None


def grad_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor] | Iterable[Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int | None = 20,
    seed: int = 0,
    floor: float = 1e-8,
) -> GradCheckReport:
    """Compare autodiff gradients of the scalar ``f()`` with central differences.

    Up to ``max_coords`` coordinates per parameter are sampled (all when
    None). Relative error is ``|ga - gf| / max(floor, |ga| + |gf|)``.
    """
    if not isinstance(params, dict):
        params = {f"p{i}": p for i, p in enumerate(params)}
    rng = np.random.default_rng(seed)
    for p in params.values():
        p.grad = None
        p.requires_grad = True
    out = f()
    bad = first_non_finite(out)
    if bad is not None:
        raise NonFiniteError(bad)
    out.backward()
    report = GradCheckReport(0.0, tol, 0)
    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        worst = 0.0
        with no_grad():
            for c in coords:
                orig = flat[c]
                flat[c] = orig + eps
                up = f().item()
                flat[c] = orig - eps
                down = f().item()
                flat[c] = orig
                if not (math.isfinite(up) and math.isfinite(down)):
                    raise NonFiniteError(first_non_finite(f()) or "f", "finite difference")
                fd = (up - down) / (2 * eps)
                ga = analytic.reshape(-1)[c]
                rel = abs(ga - fd) / max(floor, abs(ga) + abs(fd))
                worst = max(worst, rel)
        report.per_param[name] = worst
        report.checked += len(coords)
        report.max_rel_error = max(report.max_rel_error, worst)
    return report
