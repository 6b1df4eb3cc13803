"""Dense tensors with define-by-run reverse-mode differentiation.

Images and feature maps use NHWC layout (batch, height, width, channels).
Every op records a closure on the output tensor when any input requires a
gradient; ``backward`` walks that tape in reverse topological order.
"""

from __future__ import annotations

import math
import os
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float32

# NaN/Inf screening of every forward result; off unless CADNET_DEBUG is set.
DEBUG = bool(os.environ.get("CADNET_DEBUG"))


_grad_enabled = True


class ShapeError(ValueError):
    pass


@contextmanager
def no_grad():
    """Forward ops inside the block record nothing on the tape."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data: np.ndarray = np.array(data, dtype=DTYPE if dtype is None else dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = ""

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return detach(self)

    def backward(self) -> None:
        backward(self)

    # operator sugar
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

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=like.data.dtype if like is not None else None)


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    if DEBUG and not np.all(np.isfinite(data)):
        if all(np.all(np.isfinite(p.data)) for p in parents):
            raise FloatingPointError(f"{op} produced non-finite values from finite inputs")
    return out


def _shape_check(ok: bool, op: str, a, b) -> None:
    if not ok:
        raise ShapeError(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        _shape_check(False, op, a.shape, b.shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _shape_check(a.ndim == 2 and b.ndim == 2 and a.shape[1] == b.shape[0], "matmul", a.shape, b.shape)

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), bw, "matmul")


# ---------------------------------------------------------------------------
# activations and pointwise functions


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    scale = np.where(x.data > 0, 1.0, slope).astype(x.data.dtype)
    return _make(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def max_with_scalar(x: Tensor, s: float) -> Tensor:
    """Elementwise ``max(x, s)``; at a tie the gradient goes to ``s``."""
    mask = x.data > s
    out = np.where(mask, x.data, np.asarray(s, dtype=x.data.dtype))
    return _make(out, (x,), lambda g: (g * mask,), "max_with_scalar")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    mask = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * mask,), "clamp")


def detach(x: Tensor) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = x.data
    out.requires_grad = False
    out.grad = None
    out._parents = ()
    out._backward = None
    out.op = "detach"
    return out


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = math.prod(x.shape[a] for a in axes)
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def l1_mean(x: Tensor) -> Tensor:
    """Mean absolute value; the subgradient at zero is zero."""
    sign = np.sign(x.data)
    n = x.data.size
    out = np.asarray(np.abs(x.data).mean(), dtype=x.data.dtype)
    return _make(out, (x,), lambda g: (g * sign / n,), "l1_mean")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def take(x: Tensor, index) -> Tensor:
    """Select entries along the leading axis (gather); repeats accumulate in backward."""
    index = np.asarray(index, dtype=np.intp)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _make(x.data[index], (x,), bw, "take")


def pick(x: Tensor, index) -> Tensor:
    """``x[i, index[i]]`` for a 2-D tensor; returns shape ``(N,)``."""
    index = np.asarray(index, dtype=np.intp)
    _shape_check(x.ndim == 2 and index.shape == (x.shape[0],), "pick", x.shape, index.shape)
    rows = np.arange(x.shape[0])

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[rows, index] = g
        return (gx,)

    return _make(x.data[rows, index], (x,), bw, "pick")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        same = len(t.shape) == len(ref) and all(
            i == ax or p == q for i, (p, q) in enumerate(zip(ref, t.shape))
        )
        _shape_check(same, "concat", ref, t.shape)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), bw, "concat")


# ---------------------------------------------------------------------------
# convolution, pooling, resizing (NHWC)


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation. ``x``: (N, H, W, Cin); ``w``: (kh, kw, Cin, Cout)."""
    _shape_check(x.ndim == 4 and w.ndim == 4 and x.shape[3] == w.shape[2], "conv2d", x.shape, w.shape)
    n, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    _shape_check(kh <= h + 2 * pad and kw <= wd + 2 * pad, "conv2d", x.shape, w.shape)
    if b is not None:
        _shape_check(b.shape == (cout,), "conv2d", w.shape, b.shape)
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(wd, kw, stride, pad)
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.data
    cols = np.empty((n, ho, wo, kh, kw, cin), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :]
    cols = cols.reshape(n * ho * wo, kh * kw * cin)
    wmat = w.data.reshape(kh * kw * cin, cout)
    out = cols @ wmat
    if b is not None:
        out += b.data
    out = out.reshape(n, ho, wo, cout)

    def bw(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(w.shape) if w.requires_grad else None
        gb = g2.sum(axis=0) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat.T).reshape(n, ho, wo, kh, kw, cin)
            gxp = np.zeros(xp.shape, dtype=x.data.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += dcols[:, :, :, i, j, :]
            gx = gxp[:, pad : pad + h, pad : pad + wd, :] if pad else gxp
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, bw, "conv2d")


def avg_pool2d(x: Tensor, kernel: int, stride: int | None = None) -> Tensor:
    stride = stride or kernel
    _shape_check(x.ndim == 4 and kernel <= x.shape[1] and kernel <= x.shape[2], "avg_pool2d", x.shape, (kernel, kernel))
    n, h, wd, c = x.shape
    ho = conv_output_size(h, kernel, stride, 0)
    wo = conv_output_size(wd, kernel, stride, 0)
    out = np.zeros((n, ho, wo, c), dtype=x.data.dtype)
    for i in range(kernel):
        for j in range(kernel):
            out += x.data[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :]
    scale = 1.0 / (kernel * kernel)
    out *= scale

    def bw(g):
        gx = np.zeros_like(x.data)
        gs = g * scale
        for i in range(kernel):
            for j in range(kernel):
                gx[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += gs
        return (gx,)

    return _make(out, (x,), bw, "avg_pool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, H, W, C) -> (N, C)."""
    _shape_check(x.ndim == 4, "global_avg_pool", x.shape, ("N", "H", "W", "C"))
    n, h, w, c = x.shape
    scale = 1.0 / (h * w)

    def bw(g):
        return (np.broadcast_to((g * scale)[:, None, None, :], x.shape).copy(),)

    return _make(x.data.mean(axis=(1, 2)), (x,), bw, "global_avg_pool")


def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Linear-interpolation weights (n_out, n_in) on the pixel-centre grid.

    Output sample ``i`` reads source coordinate ``(i + 0.5) * n_in / n_out - 0.5``
    clamped to the valid range, so integer up-scaling preserves the mean.
    """
    m = np.zeros((n_out, n_in), dtype=np.float64)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def _resize_rows(x: np.ndarray, ry: np.ndarray, rx: np.ndarray) -> np.ndarray:
    n, h, w, c = x.shape
    out = np.matmul(ry, x.reshape(n, h, w * c))  # (n, ho, w*c)
    ho = ry.shape[0]
    out = np.matmul(rx, out.reshape(n * ho, w, c))  # (n*ho, wo, c)
    return out.reshape(n, ho, rx.shape[0], c)


def bilinear_resize(x: Tensor, size: tuple[int, int]) -> Tensor:
    _shape_check(x.ndim == 4, "bilinear_resize", x.shape, size)
    ry = resize_matrix(x.shape[1], size[0]).astype(x.data.dtype)
    rx = resize_matrix(x.shape[2], size[1]).astype(x.data.dtype)
    out = _resize_rows(x.data, ry, rx)
    return _make(out, (x,), lambda g: (_resize_rows(g, ry.T, rx.T),), "bilinear_resize")


def depth_to_space(x: Tensor, r: int) -> Tensor:
    """(N, h, w, C*r*r) -> (N, h*r, w*r, C), sub-pixel rearrangement."""
    n, h, w, cr = x.shape
    _shape_check(cr % (r * r) == 0, "depth_to_space", x.shape, (r, r))
    c = cr // (r * r)
    out = x.data.reshape(n, h, w, r, r, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, h * r, w * r, c)

    def bw(g):
        return (g.reshape(n, h, r, w, r, c).transpose(0, 1, 3, 2, 4, 5).reshape(x.shape),)

    return _make(out, (x,), bw, "depth_to_space")


# ---------------------------------------------------------------------------
# reverse pass


def _topo(root: Tensor) -> list[Tensor]:
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


def backward(loss: Tensor, inputs: Iterable[Tensor] = ()) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad.

    Leaves listed in ``inputs`` that the loss does not reach get a zero grad
    instead of staying ``None``.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("backward called on a tensor that is not part of a recorded graph")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.data.dtype)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for t in inputs:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
