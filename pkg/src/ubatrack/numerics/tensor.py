"""Reverse-mode autodiff over numpy arrays.

A Tensor wraps a float32/float64 ndarray and, while grad recording is
enabled, remembers the parents and the vector-Jacobian product of the
operation that produced it.  Calling ``backward`` on a scalar output
accumulates gradients into the ``grad`` slot of every tensor on the tape
that requires them.  All operations are value-semantic: no op mutates its
inputs.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "GradError",
    "no_grad",
    "grad_enabled",
    "as_tensor",
    "apply_op",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "sqrt",
    "expm1",
    "absolute",
    "sigmoid",
    "silu",
    "softplus",
    "relu",
    "pointwise",
    "maximum",
    "minimum",
    "clamp",
    "where",
    "tsum",
    "tmean",
    "reshape",
    "transpose",
    "concat",
    "getitem",
    "index_select",
    "pad_axis",
    "softmax",
    "layer_norm",
    "dropout",
    "contract",
]

_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent with an op's contract."""


class GradError(RuntimeError):
    """Raised on invalid gradient requests (non-scalar backward, etc.)."""


_tls = threading.local()


def grad_enabled() -> bool:
    return getattr(_tls, "grad_enabled", True)


class no_grad:
    """Context manager disabling tape recording in the current thread."""

    def __enter__(self):
        self._prev = grad_enabled()
        _tls.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _tls.grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_vjp")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        dtype=None,
        op: str = "leaf",
        parents: Sequence["Tensor"] = (),
        vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
    ):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = tuple(parents)
        self._vjp = vjp

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape}, dtype={self.data.dtype})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    # -- autograd ------------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(node) into every reachable node's grad.

        ``self`` must be a scalar (size-1) tensor.  Repeated calls keep
        accumulating until grads are cleared.
        """
        if self.data.size != 1:
            raise GradError(
                f"backward requires a scalar output, got shape {self.shape}"
            )
        order = _toposort(self)
        self.grad = (
            np.ones_like(self.data)
            if self.grad is None
            else self.grad + np.ones_like(self.data)
        )
        seed = np.ones_like(self.data)
        pending: dict[int, np.ndarray] = {id(self): seed}
        for node in order:
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node is not self and node.requires_grad and not node._parents:
                node.grad = g if node.grad is None else node.grad + g
            if node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None:
                    continue
                cur = pending.get(id(parent))
                pending[id(parent)] = pg if cur is None else cur + pg

    # -- operator sugar ------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _toposort(root: Tensor) -> list[Tensor]:
    """Reverse topological order (outputs first), iterative DFS."""
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
            if id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def apply_op(
    data: np.ndarray,
    parents: Sequence[Tensor],
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    op: str,
) -> Tensor:
    """Create an op output, recording the tape entry only when needed."""
    if grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, op=op, parents=parents, vjp=vjp)
    return Tensor(data, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to the shape of a broadcast operand."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- arithmetic ---------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return apply_op(a.data + b.data, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return apply_op(a.data - b.data, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return apply_op(a.data * b.data, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = (
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
            if b.requires_grad
            else None
        )
        return ga, gb

    return apply_op(a.data / b.data, (a, b), vjp, "div")


def neg(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return apply_op(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    a = as_tensor(a)
    e = float(exponent)
    out = a.data**e

    def vjp(g):
        return (g * e * a.data ** (e - 1.0),)

    return apply_op(out, (a,), vjp, "pow")


# -- pointwise nonlinearities -------------------------------------------


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return apply_op(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return apply_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return apply_op(out, (a,), lambda g: (g * (0.5 / out),), "sqrt")


def expm1(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return apply_op(np.expm1(a.data), (a,), lambda g: (g * np.exp(a.data),), "expm1")


def absolute(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return apply_op(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.data))
    return apply_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def silu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * s

    def vjp(g):
        return (g * (s + out * (1.0 - s)),)

    return apply_op(out, (a,), vjp, "silu")


def softplus(a: Tensor) -> Tensor:
    a = as_tensor(a)
    # log(1 + e^x) in the overflow-safe form max(x, 0) + log1p(e^-|x|)
    out = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))

    def vjp(g):
        return (g / (1.0 + np.exp(-a.data)),)

    return apply_op(out, (a,), vjp, "softplus")


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)

    def vjp(g):
        return (g * (a.data > 0.0),)

    return apply_op(out, (a,), vjp, "relu")


_POINTWISE = {
    "sigmoid": sigmoid,
    "silu": silu,
    "softplus": softplus,
    "relu": relu,
    "expm1": expm1,
}


def pointwise(x: Tensor, f: str) -> Tensor:
    """Apply a named elementwise nonlinearity from the supported set."""
    try:
        fn = _POINTWISE[f]
    except KeyError:
        raise ValueError(
            f"unknown pointwise function {f!r}; choose from {sorted(_POINTWISE)}"
        ) from None
    return fn(x)


# -- selection ----------------------------------------------------------


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    amask = a.data >= b.data

    def vjp(g):
        ga = _unbroadcast(g * amask, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ~amask, b.shape) if b.requires_grad else None
        return ga, gb

    return apply_op(np.maximum(a.data, b.data), (a, b), vjp, "maximum")


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    amask = a.data <= b.data

    def vjp(g):
        ga = _unbroadcast(g * amask, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ~amask, b.shape) if b.requires_grad else None
        return ga, gb

    return apply_op(np.minimum(a.data, b.data), (a, b), vjp, "minimum")


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = np.ones_like(a.data, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi
    return apply_op(out, (a,), lambda g: (g * inside,), "clamp")


def where(mask: np.ndarray, a, b) -> Tensor:
    """Elementwise select by a boolean ndarray mask (mask carries no grad)."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)

    def vjp(g):
        ga = _unbroadcast(g * mask, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ~mask, b.shape) if b.requires_grad else None
        return ga, gb

    return apply_op(np.where(mask, a.data, b.data), (a, b), vjp, "where")


# -- reductions ---------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        if not keepdims:
            g = np.expand_dims(g, tuple(ax % a.ndim for ax in axes))
        return (np.broadcast_to(g, a.shape).copy(),)

    return apply_op(out, (a,), vjp, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax % a.ndim] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- shape manipulation -------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    out = a.data.reshape(shape)
    return apply_op(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = np.argsort(axes)
    out = a.data.transpose(axes)
    return apply_op(out, (a,), lambda g: (g.transpose(inv),), "transpose")


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        parts = np.split(g, splits, axis=axis)
        return tuple(
            p if t.requires_grad else None for p, t in zip(parts, ts)
        )

    return apply_op(out, ts, vjp, "concat")


def getitem(a: Tensor, key) -> Tensor:
    """Basic indexing (ints and slices); backward scatters into zeros."""
    a = as_tensor(a)
    out = a.data[key]

    def vjp(g):
        ga = np.zeros_like(a.data)
        ga[key] = g
        return (ga,)

    return apply_op(np.ascontiguousarray(out), (a,), vjp, "getitem")


def index_select(a: Tensor, axis: int, idx: np.ndarray) -> Tensor:
    """Gather along one axis; backward scatter-adds (indices may repeat)."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    out = np.take(a.data, idx, axis=axis)

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(
            ga,
            tuple(idx if ax == axis % a.ndim else slice(None) for ax in range(a.ndim)),
            g,
        )
        return (ga,)

    return apply_op(out, (a,), vjp, "index_select")


def pad_axis(a: Tensor, axis: int, before: int, after: int) -> Tensor:
    """Zero-pad one axis."""
    a = as_tensor(a)
    widths = [(0, 0)] * a.ndim
    widths[axis % a.ndim] = (before, after)
    out = np.pad(a.data, widths)
    key = tuple(
        slice(before, before + a.shape[ax]) if ax == axis % a.ndim else slice(None)
        for ax in range(a.ndim)
    )
    return apply_op(out, (a,), lambda g: (np.ascontiguousarray(g[key]),), "pad")


# -- fused numerical ops ------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return apply_op(out, (a,), vjp, "softmax")


def layer_norm(
    x: Tensor, gamma: Tensor, beta: Tensor, axis: int = -1, eps: float = 1e-5
) -> Tensor:
    """Normalize to zero mean / unit variance along ``axis``, then affine.

    gamma and beta are 1-D with the channel extent; they broadcast along the
    normalized axis.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    ax = axis % x.ndim
    c = x.shape[ax]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"layer_norm affine params must have shape ({c},); "
            f"got gamma {gamma.shape}, beta {beta.shape}"
        )
    bshape = tuple(c if i == ax else 1 for i in range(x.ndim))
    mu = x.data.mean(axis=ax, keepdims=True)
    var = x.data.var(axis=ax, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    gb = gamma.data.reshape(bshape)
    out = xhat * gb + beta.data.reshape(bshape)
    reduce_axes = tuple(i for i in range(x.ndim) if i != ax)

    def vjp(g):
        gx = None
        if x.requires_grad:
            gg = g * gb
            m1 = gg.mean(axis=ax, keepdims=True)
            m2 = (gg * xhat).mean(axis=ax, keepdims=True)
            gx = inv * (gg - m1 - xhat * m2)
        ggamma = (
            (g * xhat).sum(axis=reduce_axes).astype(gamma.dtype)
            if gamma.requires_grad
            else None
        )
        gbeta = (
            g.sum(axis=reduce_axes).astype(beta.dtype) if beta.requires_grad else None
        )
        return gx, ggamma, gbeta

    return apply_op(out, (x, gamma, beta), vjp, "layer_norm")


def dropout(
    x: Tensor, rate: float, rng: np.random.Generator, training: bool
) -> Tensor:
    """Inverted dropout; identity when not training or rate == 0."""
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return apply_op(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# -- generalized contraction ---------------------------------------------


def _parse_contract_spec(spec: str, a: Tensor, b: Tensor):
    spec = spec.replace(" ", "")
    if "->" not in spec or spec.count(",") != 1:
        raise ShapeError(f"contract spec must look like 'ij,jk->ik', got {spec!r}")
    lhs, out_sub = spec.split("->")
    a_sub, b_sub = lhs.split(",")
    for name, sub, t in (("a", a_sub, a), ("b", b_sub, b)):
        if not sub.isalpha():
            raise ShapeError(f"contract spec indices must be letters, got {sub!r}")
        if len(set(sub)) != len(sub):
            raise ShapeError(f"repeated index within operand {name}: {sub!r}")
        if len(sub) != t.ndim:
            raise ShapeError(
                f"operand {name} has {t.ndim} axes but spec {sub!r} names {len(sub)}"
            )
    extents: dict[str, int] = {}
    for sub, t, name in ((a_sub, a, "a"), (b_sub, b, "b")):
        for idx, n in zip(sub, t.shape):
            if extents.setdefault(idx, n) != n:
                raise ShapeError(
                    f"axis {idx!r}: extent {extents[idx]} vs {n} on operand {name}"
                )
    for idx in out_sub:
        if idx not in extents:
            raise ShapeError(f"output axis {idx!r} missing from inputs")
    for idx in a_sub:
        if idx not in b_sub and idx not in out_sub:
            raise ShapeError(f"axis {idx!r} of a is neither contracted nor output")
    for idx in b_sub:
        if idx not in a_sub and idx not in out_sub:
            raise ShapeError(f"axis {idx!r} of b is neither contracted nor output")
    return a_sub, b_sub, out_sub


def contract(a: Tensor, b: Tensor, spec: str) -> Tensor:
    """Two-operand index contraction (einsum), differentiable in both inputs.

    ``spec`` uses einsum notation, e.g. ``'ij,jk->ik'`` for matmul.  Every
    index of each operand must appear in the other operand or in the output.
    """
    a, b = as_tensor(a), as_tensor(b)
    a_sub, b_sub, out_sub = _parse_contract_spec(spec, a, b)
    out = np.einsum(f"{a_sub},{b_sub}->{out_sub}", a.data, b.data)

    def vjp(g):
        ga = (
            np.einsum(f"{out_sub},{b_sub}->{a_sub}", g, b.data)
            if a.requires_grad
            else None
        )
        gb = (
            np.einsum(f"{out_sub},{a_sub}->{b_sub}", g, a.data)
            if b.requires_grad
            else None
        )
        return ga, gb

    return apply_op(out, (a, b), vjp, "contract")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map along the last axis: x @ w (+ b), w shaped (in, out)."""
    x = as_tensor(x)
    letters = "zyxwvu"[: x.ndim - 1]
    out = contract(x, w, f"{letters}i,ij->{letters}j")
    if b is not None:
        out = add(out, b)
    return out
