"""Minimal reverse-mode differentiation over numpy arrays.

Only the operations this network needs are provided.  A graph is built while
``grad_enabled()`` is true and any input requires a gradient; ``backward``
walks it once in reverse topological order and then releases it, so a second
backward over the same graph is rejected rather than silently recomputed.

The binarizer's forward is the sign function (0 maps to +1).  Its backward is
the derivative of the piecewise-quadratic ApproxSign surrogate::

    d/dx = 2 + 2x  on [-1, 0)
           2 - 2x  on [0, 1]
           0       elsewhere
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from . import fastops
from .errors import InvalidInputError, MissingGradientError
from .kernels import col2im, conv2d_nchw

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A node in the computation graph: a value, a gradient slot and a backward rule."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name", "_released")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.name = name
        self._released = False

    @classmethod
    def from_op(cls, data, parents: Sequence["Tensor"], backward_fn: Callable, op: str) -> "Tensor":
        """Create an op output; ``backward_fn(g)`` returns one gradient (or None) per parent."""
        out = cls(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward_fn
            out.op = op
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self):
        return backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op}, requires_grad={self.requires_grad})"

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
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(np.array(data, copy=True), requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _toposort(root: Tensor) -> list[Tensor]:
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None, grad=None) -> dict[Tensor, np.ndarray]:
    """Back-propagate from ``loss`` and accumulate into every reachable leaf's ``.grad``.

    Returns a map from leaf tensor to its gradient.  When ``params`` is given,
    every one of them must be reachable or :class:`MissingGradientError` is
    raised.
    """
    if loss._released:
        raise RuntimeError("graph already consumed; double backward is not supported")
    if not loss.requires_grad:
        raise MissingGradientError("loss is detached from every parameter")
    order = _toposort(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data) if grad is None else np.asarray(grad, loss.dtype)}
    reached: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            reached[node] = node.grad
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg
    for node in order:
        if not node.is_leaf:
            node._backward = None
            node._parents = ()
            node._released = True
    if params is not None:
        missing = [p.name or repr(p) for p in params if p not in reached]
        if missing:
            raise MissingGradientError(f"no gradient reached: {', '.join(missing[:5])}")
    return reached


# --------------------------------------------------------------------------
# elementwise and structural ops
# --------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return Tensor.from_op(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return Tensor.from_op(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad * bd

    def bw(g):
        ga = _unbroadcast(g * bd, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor.from_op(out, (a, b), bw, "mul")


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    shape = x.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return Tensor.from_op(np.sum(x.data, axis=axis), (x,), bw, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return Tensor.from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs)))

    return Tensor.from_op(np.concatenate([x.data for x in xs], axis=axis), xs, bw, "concat")


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return Tensor.from_op(x.data[:, start:stop], (x,), bw, "slice")


def take_channels(x: Tensor, index) -> Tensor:
    """Gather channels along axis 1; ``index`` must not repeat."""
    index = np.asarray(index)
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, index] = g
        return (full,)

    return Tensor.from_op(x.data[:, index], (x,), bw, "take")


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if factor == 1:
        return x
    n, c, h, w = x.shape

    def bw(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return Tensor.from_op(x.data.repeat(factor, axis=2).repeat(factor, axis=3), (x,), bw, "upsample")


def clamp_min(x: Tensor, lo: float) -> Tensor:
    mask = x.data > lo
    return Tensor.from_op(np.maximum(x.data, lo), (x,), lambda g: (g * mask,), "clamp_min")


# --------------------------------------------------------------------------
# the binarizer
# --------------------------------------------------------------------------


def approx_sign(x):
    """The smooth ApproxSign surrogate whose derivative drives the binarizer's backward."""
    x = np.asarray(x)
    return np.where(x < -1, -1.0, np.where(x < 0, 2 * x + x * x, np.where(x < 1, 2 * x - x * x, 1.0))).astype(
        x.dtype if x.dtype.kind == "f" else np.float64
    )


def approx_sign_grad(x):
    # 2 + 2x on [-1, 0) and 2 - 2x on [0, 1] are both 2 - 2|x|; zero outside
    x = np.asarray(x)
    if x.dtype.kind != "f":
        x = x.astype(np.float64)
    return np.maximum(2 - 2 * np.abs(x), 0).astype(x.dtype, copy=False)


_SMOOTH = False


@contextlib.contextmanager
def smooth_binarizer():
    """Use the ApproxSign polynomial itself as the forward of the binarizer.

    The backward is unchanged, so inside this context every binary layer is a
    C1 function whose exact derivative is what training uses.  Gradient
    checks rely on this; training never does.
    """
    global _SMOOTH
    prev, _SMOOTH = _SMOOTH, True
    try:
        yield
    finally:
        _SMOOTH = prev


def sign_ste(x: Tensor) -> Tensor:
    """Forward sign (0 -> +1); backward ApproxSign derivative times upstream."""
    xd = x.data
    if _SMOOTH:
        return Tensor.from_op(approx_sign(xd), (x,), lambda g: (fastops.sign_backward(g, xd),), "approx_sign")
    return Tensor.from_op(fastops.sign(xd), (x,), lambda g: (fastops.sign_backward(g, xd),), "sign_ste")


def sign_ste_backward(x, upstream) -> np.ndarray:
    """Gradient of the binarizer at ``x`` given ``upstream``."""
    return np.asarray(upstream) * approx_sign_grad(x)


# --------------------------------------------------------------------------
# layers
# --------------------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0, pad_value: float = 0.0) -> Tensor:
    """Cross-correlation of ``(N, C, H, W)`` input with ``(O, C, k, k)`` weights."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise InvalidInputError(f"conv2d shape mismatch: x {x.shape}, w {w.shape}")
    out, cols, (oh, ow) = conv2d_nchw(x.data, w.data, stride, padding, pad_value)
    x_shape, w_shape = x.shape, w.shape
    k = w_shape[2]
    wmat = w.data.reshape(w_shape[0], -1)

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, w_shape[0])
        gw = (gm.T @ cols).reshape(w_shape) if w.requires_grad else None
        gx = col2im(gm @ wmat, x_shape, k, stride, padding, (oh, ow)) if x.requires_grad else None
        return gx, gw

    return Tensor.from_op(out, (x, w), bw, "conv2d")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` for ``x`` of shape ``(N, in)`` and ``w`` of shape ``(out, in)``."""
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is not None:
        out = out + b.data

    def bw(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ xd if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor.from_op(out, parents, bw, "linear")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization; updates the running buffers in place when training."""
    xd = x.data
    if training:
        m = xd.size // xd.shape[1]
        mu, var = fastops.bn_stats(xd)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var.astype(np.float64) + eps)).astype(xd.dtype)
    out, xhat = fastops.bn_apply(xd, mu, inv_std, gamma.data, beta.data)

    def bw(g):
        return fastops.bn_backward(g, xhat, gamma.data, inv_std, training)

    return Tensor.from_op(out, (x, gamma, beta), bw, "batch_norm")


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """Leaky rectifier with one learnable slope per channel (axis 1)."""
    xd = x.data
    a = slope.data

    def bw(g):
        return fastops.prelu_backward(g, xd, a)

    return Tensor.from_op(fastops.prelu(xd, a), (x, slope), bw, "prelu")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return Tensor.from_op(x.data * pos, (x,), lambda g: (g * pos,), "relu")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1 / (1 + e), e / (1 + e))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data).astype(x.dtype)
    return Tensor.from_op(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def global_avg_pool(x: Tensor) -> Tensor:
    """``(N, C, H, W) -> (N, C)`` spatial mean."""
    n, c, h, w = x.shape

    def bw(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), (n, c, h, w)).copy(),)

    return Tensor.from_op(x.data.mean(axis=(2, 3)), (x,), bw, "gap")


def scale_channels(x: Tensor, s: Tensor) -> Tensor:
    """Multiply ``(N, C, H, W)`` by per-sample channel weights ``(N, C)``."""
    return mul(x, reshape(s, s.shape + (1, 1)))
