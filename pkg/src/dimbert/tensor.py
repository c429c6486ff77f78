"""Dense tensors with reverse-mode differentiation.

A deliberately small autograd engine: every op checks shapes strictly, records
its inputs and a closure that maps the output gradient to input gradients, and
refuses to emit non-finite values.  The only implicit broadcasting allowed is a
1-D bias added over the last axis; constants (plain numpy arrays) may be
broadcast since no gradient flows into them.

Precision is a process-wide mode: ``"double"`` for verification,
``"single"`` for faster training.  Leaves are created in the current mode and
ops preserve the dtype of their inputs.
"""

from __future__ import annotations

import itertools
import math
from contextlib import contextmanager
from typing import Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, DimensionError, GradientStateError, NonFiniteError

_PRECISIONS = {"double": np.float64, "single": np.float32}
_precision = "double"
_counter = itertools.count()
check_finite = True


def set_precision(mode: str) -> None:
    global _precision
    if mode not in _PRECISIONS:
        raise ValueError(f"unknown precision {mode!r}; expected one of {sorted(_PRECISIONS)}")
    _precision = mode


def get_precision() -> str:
    return _precision


def default_dtype():
    return _PRECISIONS[_precision]


@contextmanager
def precision(mode: str):
    previous = _precision
    set_precision(mode)
    try:
        yield
    finally:
        set_precision(previous)


class Tensor:
    """An immutable array plus the bookkeeping needed for backpropagation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=default_dtype())
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._seq = next(_counter)
        self.op = "leaf"
        self.name = name
        _assert_finite(self.data, "leaf")

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

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def _assert_finite(arr: np.ndarray, op: str) -> None:
    if check_finite and not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _node(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    _assert_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._seq = next(_counter)
    out.op = op
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


# --------------------------------------------------------------------------
# Elementwise arithmetic
# --------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    """a + b for equal shapes, or a 1-D tensor ``b`` added over the last axis.

    A plain numpy ``b`` is a constant and may broadcast freely.
    """
    if not isinstance(b, Tensor):
        const = np.asarray(b, dtype=a.dtype)
        try:
            out = a.data + const
        except ValueError as exc:
            raise DimensionError(str(exc)) from None
        if out.shape != a.shape:
            raise DimensionError(f"constant of shape {const.shape} would broadcast {a.shape} to {out.shape}")
        return _node(out, (a,), lambda g: (g,), "add_const")

    if a.shape == b.shape:
        return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        lead = tuple(range(a.ndim - 1))
        return _node(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=lead)), "add_bias")
    raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"cannot subtract shapes {a.shape} and {b.shape}")
    return _node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product of equal-shape tensors, or scaling by a python/numpy constant."""
    if not isinstance(b, Tensor):
        const = np.asarray(b, dtype=a.dtype)
        out = a.data * const
        if out.shape != a.shape:
            raise DimensionError(f"constant of shape {const.shape} would broadcast {a.shape} to {out.shape}")
        return _node(out, (a,), lambda g: (g * const,), "mul_const")
    if a.shape != b.shape:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(x: Tensor, s: Tensor) -> Tensor:
    """Multiply every entry of ``x`` by the single-element tensor ``s``."""
    if s.data.size != 1:
        raise DimensionError(f"scale factor must have one element, got shape {s.shape}")
    xd, sv = x.data, s.data.reshape(())

    def backward(g):
        return g * sv, np.sum(g * xd).reshape(s.shape)

    return _node(xd * sv, (x, s), backward, "scale")


_SQRT2 = math.sqrt(2.0)
_SQRT2PI = math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT2))
    pdf = np.exp(-0.5 * xd * xd) / _SQRT2PI
    return _node(xd * cdf, (x,), lambda g: (g * (cdf + xd * pdf),), "gelu")


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _node(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


# --------------------------------------------------------------------------
# Shape manipulation
# --------------------------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    src = x.shape
    return _node(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise DimensionError("concat of zero tensors")
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors:
        if t.ndim != ndim or t.shape[:ax] + t.shape[ax + 1:] != tensors[0].shape[:ax] + tensors[0].shape[ax + 1:]:
            raise DimensionError(f"concat shapes disagree off axis {axis}: {[t.shape for t in tensors]}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return _node(out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=ax)), "concat")


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Rows of a 2-D ``table`` selected by integer ``ids`` (any shape)."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError(f"embedding table must be 2-D, got {table.shape}")
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"embedding index out of range [0, {n})")
    shape = table.shape

    def backward(g):
        grad = np.zeros(shape, dtype=g.dtype)
        np.add.at(grad, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (grad,)

    return _node(table.data[ids], (table,), backward, "embedding")


gather_rows = embedding_lookup


def scatter_rows(src: Tensor, index, n_rows: int) -> Tensor:
    """Place the rows of ``src`` at distinct ``index`` positions of an (n_rows, d) zero matrix."""
    index = np.asarray(index, dtype=np.int64)
    if src.ndim != 2 or index.shape != (src.shape[0],):
        raise DimensionError(f"scatter needs (N, d) rows and N indices, got {src.shape} and {index.shape}")
    if index.size:
        if index.min() < 0 or index.max() >= n_rows:
            raise IndexError("scatter index out of range")
        if np.unique(index).size != index.size:
            raise ContractError("scatter indices must be distinct")
    out = np.zeros((n_rows, src.shape[1]), dtype=src.dtype)
    out[index] = src.data
    return _node(out, (src,), lambda g: (g[index],), "scatter")


def row_select(cond, a: Tensor, b: Tensor) -> Tensor:
    """Row-wise choice: rows of ``a`` where ``cond`` holds, else rows of ``b``.

    ``cond`` is a boolean array of shape ``a.shape[:-1]``.
    """
    cond = np.asarray(cond, dtype=bool)
    if a.shape != b.shape or cond.shape != a.shape[:-1]:
        raise DimensionError(f"row_select shapes: cond {cond.shape}, a {a.shape}, b {b.shape}")
    c = cond[..., None]
    return _node(np.where(c, a.data, b.data), (a, b), lambda g: (np.where(c, g, 0.0), np.where(c, 0.0, g)), "row_select")


# --------------------------------------------------------------------------
# Linear algebra
# --------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either a 2-D weight shared across the leading axes of ``a``, or
    has exactly the same leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"inner extents disagree: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if b.ndim == 2:
        k, n = bd.shape

        def backward(g):
            return g @ bd.T, ad.reshape(-1, k).T @ g.reshape(-1, n)

    elif a.shape[:-2] == b.shape[:-2]:

        def backward(g):
            return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    else:
        raise DimensionError(f"matmul leading axes disagree: {a.shape} @ {b.shape}")
    return _node(ad @ bd, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# --------------------------------------------------------------------------
# Normalisers and reductions
# --------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _node(y, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _node(y, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),), "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm affine params must have shape ({d},), got {gain.shape}, {bias.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    gd = gain.data
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        dxhat = g * gd
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _node(xhat * gd + bias.data, (x, gain, bias), backward, "layer_norm")


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return _node(np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, g, dtype=x.dtype),), "sum")


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return _node(np.asarray(x.data.mean()), (x,), lambda g: (np.full(shape, g / n, dtype=x.dtype),), "mean")


def cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean of ``-log softmax(logits)[target]`` over rows.

    ``logits`` is (V,) with an int target, or (N, V) with N int targets.
    """
    single = logits.ndim == 1
    lg = logits.data[None, :] if single else logits.data
    tgt = np.atleast_1d(np.asarray(target, dtype=np.int64))
    if lg.ndim != 2 or tgt.shape != (lg.shape[0],):
        raise DimensionError(f"cross_entropy shapes: logits {logits.shape}, target {tgt.shape}")
    v = lg.shape[1]
    if tgt.size and (tgt.min() < 0 or tgt.max() >= v):
        raise IndexError(f"target index out of vocabulary range [0, {v})")
    n = lg.shape[0]
    z = lg - lg.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = -logp[rows, tgt].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[rows, tgt] -= 1.0
        grad *= g / n
        return (grad[0] if single else grad,)

    return _node(np.asarray(loss), (logits,), backward, "cross_entropy")


def bce_with_logits(logits: Tensor, labels) -> Tensor:
    """Summed binary cross-entropy of sigmoid(logits) against 0/1 labels."""
    y = np.asarray(labels, dtype=logits.dtype)
    if y.shape != logits.shape:
        raise DimensionError(f"labels {y.shape} do not match logits {logits.shape}")
    x = logits.data
    loss = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    prob = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _node(np.asarray(loss.sum()), (logits,), lambda g: (g * (prob - y),), "bce")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    keep = keep.astype(x.dtype)
    return _node(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# --------------------------------------------------------------------------
# Backpropagation
# --------------------------------------------------------------------------


def graph_nodes(root: Tensor) -> list[Tensor]:
    """All nodes reachable from ``root``, inputs before the nodes consuming them."""
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen[id(node)] = node
        stack.extend(node._parents)
    return sorted(seen.values(), key=lambda t: t._seq)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every ``requires_grad`` leaf reachable from ``loss``.

    Raises GradientStateError if any such leaf still carries a gradient from an
    earlier pass; call ``zero_grad`` first.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any trainable tensor")
    nodes = graph_nodes(loss)
    leaves = [t for t in nodes if t._backward is None and t.requires_grad]
    stale = [t.name or repr(t) for t in leaves if t.grad is not None]
    if stale:
        raise GradientStateError(f"gradients not reset before backward: {stale[:3]}")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = np.array(g, dtype=node.dtype)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for leaf in leaves:
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
