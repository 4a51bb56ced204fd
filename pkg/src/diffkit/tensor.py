"""Minimal N-dimensional tensor with reverse-mode automatic differentiation.

Arrays are held as numpy buffers. Every differentiable op records its parents
and a closure mapping the output gradient to per-parent gradients; calling
:meth:`Tensor.backward` on a scalar walks that graph in reverse topological
order. Broadcasting is limited to scalars: anything else goes through an
explicit :func:`broadcast_to`.

Training runs in single precision. Wrap code in ``precision(np.float64)`` for
gradient checks.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigError, ContractError, ShapeError
from .rng import Rng

_state = threading.local()


def default_dtype():
    return getattr(_state, "dtype", np.float32)


def grad_enabled() -> bool:
    return getattr(_state, "grad", True)


@contextlib.contextmanager
def precision(dtype):
    """Set the dtype used for newly constructed tensors."""
    prev = default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad():
    """Disable graph recording, e.g. during sampling."""
    prev = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.array(data, dtype=dtype or default_dtype())
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[BackwardFn] = None
        self.op = "leaf"

    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple, backward: BackwardFn, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        needs = grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        out._parents = parents if needs else ()
        out._backward = backward if needs else None
        return out

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    # -- autodiff -------------------------------------------------------
    def backward(self) -> None:
        """Populate ``.grad`` on every leaf that requires it.

        Leaf gradients accumulate across calls until zeroed.
        """
        if self.data.size != 1 or self.data.ndim != 0:
            raise ContractError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("loss does not depend on any tensor requiring grad")
        order = topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- operators --------------------------------------------------------
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
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``; every node appears after its inputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
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
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _is_scalar(b) -> bool:
    return isinstance(b, (int, float, np.floating, np.integer)) or (
        isinstance(b, Tensor) and b.ndim == 0
    )


def _check_binary(a: Tensor, b, opname: str) -> None:
    if isinstance(b, Tensor) and b.ndim != 0 and a.shape != b.shape:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} differ")


# -- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    _check_binary(a, b, "add")
    if isinstance(b, Tensor):
        if b.ndim == 0 and a.ndim != 0:
            return Tensor._result(a.data + b.data, (a, b), lambda g: (g, np.sum(g)), "add")
        if a.ndim == 0 and b.ndim != 0:
            return add(b, a)
        return Tensor._result(a.data + b.data, (a, b), lambda g: (g, g), "add")
    return Tensor._result(a.data + b, (a,), lambda g: (g,), "add")


def sub(a: Tensor, b) -> Tensor:
    return add(a, neg(b) if isinstance(b, Tensor) else -b)


def neg(a: Tensor) -> Tensor:
    return Tensor._result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    _check_binary(a, b, "mul")
    if isinstance(b, Tensor):
        if a.ndim == 0 and b.ndim != 0:
            return mul(b, a)
        ad, bd = a.data, b.data
        if b.ndim == 0 and a.ndim != 0:
            return Tensor._result(ad * bd, (a, b), lambda g: (g * bd, np.sum(g * ad)), "mul")
        return Tensor._result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")
    return Tensor._result(a.data * b, (a,), lambda g: (g * b,), "mul")


def div(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        return mul(a, power(b, -1.0))
    return mul(a, 1.0 / b)


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    out = ad**exponent
    return Tensor._result(out, (a,), lambda g: (g * exponent * ad ** (exponent - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._result(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor._result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))
    return Tensor._result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def silu(a: Tensor) -> Tensor:
    ad = a.data
    s = 1.0 / (1.0 + np.exp(-ad))
    out = ad * s
    return Tensor._result(out, (a,), lambda g: (g * (s + out * (1.0 - s)),), "silu")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


# -- reductions and shape ops -----------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._result(np.asarray(out), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(tsum(a, axis, keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    out = a.data.reshape(shape)
    return Tensor._result(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    out = np.transpose(a.data, axes)
    return Tensor._result(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicit broadcast; size-1 axes of ``a`` are repeated to ``shape``."""
    shape = tuple(shape)
    if a.ndim != len(shape) or any(s != 1 and s != t for s, t in zip(a.shape, shape)):
        raise ShapeError(f"cannot broadcast {a.shape} to {shape}")
    axes = tuple(i for i, (s, t) in enumerate(zip(a.shape, shape)) if s == 1 and t != 1)
    out = np.broadcast_to(a.data, shape)
    return Tensor._result(out, (a,), lambda g: (np.sum(g, axis=axes, keepdims=True),), "broadcast")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            i != axis % len(ref) and s != r for i, (s, r) in enumerate(zip(t.shape, ref))
        ):
            raise ShapeError(f"concat: {t.shape} incompatible with {ref} along axis {axis}")
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._result(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def take_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows of a 2-d table (embedding lookup)."""
    index = np.asarray(index, dtype=np.int64)
    out = table.data[index]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, index, g)
        return (gt,)

    return Tensor._result(out, (table,), backward, "take")


# -- linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-d operands, or batched with identical leading axes."""
    if a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} incompatible")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(ad, -1, -2), g) if b.requires_grad else None
        return ga, gb

    return Tensor._result(out, (a, b), backward, "matmul")


def _pads(pad) -> tuple[int, int, int, int]:
    if isinstance(pad, int):
        return pad, pad, pad, pad
    top, bottom, left, right = pad
    return int(top), int(bottom), int(left), int(right)


def conv_output_size(size: int, kernel: int, stride: int, pad_total: int) -> int:
    span = size + pad_total - kernel
    if span < 0 or span % stride:
        raise ConfigError(
            f"conv: input {size}, kernel {kernel}, stride {stride}, padding {pad_total} "
            "gives a non-integer output size"
        )
    return span // stride + 1


def conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None, stride: int = 1, pad=0) -> Tensor:
    """2-d cross-correlation of ``x[N,C,H,W]`` with ``w[K,C,kh,kw]``.

    ``pad`` is an int or a ``(top, bottom, left, right)`` tuple.
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} and weight {w.shape} incompatible")
    n, c, h, wd = x.shape
    k, _, kh, kw = w.shape
    pt, pb, pl, pr = _pads(pad)
    ho = conv_output_size(h, kh, stride, pt + pb)
    wo = conv_output_size(wd, kw, stride, pl + pr)
    # channel-major layout: columns are (C*kh*kw, N*Ho*Wo)
    xc = np.ascontiguousarray(x.data.transpose(1, 0, 2, 3))
    if pt or pb or pl or pr:
        xc = np.pad(xc, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xc[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    cols = cols.reshape(c * kh * kw, n * ho * wo)
    w2 = w.data.reshape(k, c * kh * kw)
    out = w2 @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(k, n, ho, wo).transpose(1, 0, 2, 3))

    def backward(g):
        gx = gw = gb = None
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(k, n * ho * wo)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=1)
        if w.requires_grad:
            gw = (g2 @ cols.T).reshape(w.shape)
        if x.requires_grad:
            gcols = (w2.T @ g2).reshape(c, kh, kw, n, ho, wo)
            gxc = np.zeros(xc.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxc[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, i, j]
            gx = np.ascontiguousarray(gxc[:, :, pt : pt + h, pl : pl + wd].transpose(1, 0, 2, 3))
        return gx, gw, gb

    parents = (x, w) if bias is None else (x, w, bias)
    return Tensor._result(out, parents, backward, "conv2d")


# -- normalization and activations -----------------------------------------

def group_norm(x: Tensor, groups: int, gamma: Optional[Tensor] = None,
               beta: Optional[Tensor] = None, eps: float = 1e-5) -> Tensor:
    n, c = x.shape[:2]
    if c % groups:
        raise ConfigError(f"group_norm: {c} channels not divisible into {groups} groups")
    xg = x.data.reshape(n, groups, -1)
    m = xg.shape[-1]
    mu = xg.mean(axis=-1, keepdims=True)
    centered = xg - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (centered * inv_std).reshape(x.shape)
    bshape = (1, c) + (1,) * (x.ndim - 2)
    out = xhat
    if gamma is not None:
        out = out * gamma.data.reshape(bshape)
    if beta is not None:
        out = out + beta.data.reshape(bshape)
    red = (0,) + tuple(range(2, x.ndim))

    def backward(g):
        ggamma = (g * xhat).sum(axis=red) if gamma is not None and gamma.requires_grad else None
        gbeta = g.sum(axis=red) if beta is not None and beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(bshape) if gamma is not None else g
            dxhat = dxhat.reshape(n, groups, -1)
            xh = xhat.reshape(n, groups, -1)
            gx = (inv_std / m) * (
                m * dxhat - dxhat.sum(axis=-1, keepdims=True) - xh * (dxhat * xh).sum(axis=-1, keepdims=True)
            )
            gx = gx.reshape(x.shape)
        return gx, ggamma, gbeta

    parents = tuple(p for p in (x, gamma, beta) if p is not None)
    if gamma is None and beta is None:
        return Tensor._result(out, parents, lambda g: backward(g)[:1], "group_norm")
    if gamma is None or beta is None:
        raise ContractError("group_norm: pass both gamma and beta or neither")
    return Tensor._result(out, parents, backward, "group_norm")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return Tensor._result(
        out, (x,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),), "softmax"
    )


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)
    return Tensor._result(out, (x,), lambda g: (g - probs * g.sum(axis=axis, keepdims=True),), "log_softmax")


def dropout(x: Tensor, p: float, rng: Optional[Rng]) -> Tensor:
    """Inverted dropout; identity when ``p == 0`` or ``rng`` is None."""
    if p <= 0.0 or rng is None:
        return x
    keep = (rng.uniform(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return Tensor._result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# -- resampling ---------------------------------------------------------------

def avg_pool2d(x: Tensor, k: int) -> Tensor:
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ConfigError(f"avg_pool2d: {h}x{w} not divisible by {k}")
    out = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def backward(g):
        return (np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k),)

    return Tensor._result(out, (x,), backward, "avg_pool2d")


def upsample_nearest2d(x: Tensor, factor: int = 2) -> Tensor:
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return Tensor._result(out, (x,), backward, "upsample")


# -- constructors ---------------------------------------------------------------

def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def random_normal(shape, rng: Rng, requires_grad: bool = False) -> Tensor:
    return Tensor(rng.normal(tuple(shape)), requires_grad=requires_grad)


def random_uniform(shape, rng: Rng, requires_grad: bool = False) -> Tensor:
    return Tensor(rng.uniform(tuple(shape)), requires_grad=requires_grad)


def mse(a: Tensor, b) -> Tensor:
    diff = sub(a, b)
    return mean(mul(diff, diff))


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
