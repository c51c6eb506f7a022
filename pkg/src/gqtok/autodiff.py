"""Reverse-mode automatic differentiation over dense numpy arrays.

A Tensor wraps a numpy array together with the op and parent tensors that
produced it; ``backward()`` walks the graph in reverse topological order and
accumulates gradients into every reachable node. The op vocabulary is fixed
and small on purpose: exactly what the desk-scale encoder/decoder/
discriminator stacks and the grouped entropy losses need. No graph compiler,
no dynamic shapes, no higher-order derivatives.

Gradients are deterministic: graph construction order fixes the traversal
order, and all reductions go through numpy's pairwise summation with 64-bit
accumulators.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

# Observers get (n_elements, itemsize) for every buffer a Tensor allocates.
# Used by the entropy module's allocation audit.
_alloc_observers: list[Callable[[int, int], None]] = []

_ids = itertools.count()


class AutodiffError(ValueError):
    pass


class ShapeMismatch(AutodiffError):
    def __init__(self, op: str, a, b):
        super().__init__(f"{op}: incompatible shapes {tuple(a)} vs {tuple(b)}")


class NonFiniteValue(AutodiffError):
    def __init__(self, op: str, node_id: int):
        super().__init__(f"non-finite output of op '{op}' (node {node_id})")


class NonScalarLoss(AutodiffError):
    pass


def _notify_alloc(arr: np.ndarray) -> None:
    for obs in _alloc_observers:
        obs(arr.size, arr.itemsize)


class Tensor:
    """One node of the tape: a dense value, its parents, and a backward rule."""

    __slots__ = ("data", "grad", "op", "id", "_parents", "_backward")

    def __init__(self, data, parents: Sequence["Tensor"] = (), op: str = "leaf",
                 backward_fn: Callable[[np.ndarray], None] | None = None,
                 _check: bool = True):
        if not isinstance(data, np.ndarray):
            data = np.asarray(data, dtype=np.float64)
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float64)
        self.data = data
        self.grad: np.ndarray | None = None
        self.op = op
        self.id = next(_ids)
        self._parents = tuple(parents)
        self._backward = backward_fn
        _notify_alloc(data)
        if _check and not np.all(np.isfinite(data)):
            raise NonFiniteValue(op, self.id)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            buf = np.zeros_like(self.data)
            _notify_alloc(buf)
            self.grad = buf
        self.grad += g

    def backward(self) -> None:
        """Populate .grad on every node reachable from this scalar loss."""
        if self.data.size != 1:
            raise NonScalarLoss(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _toposort(self)
        self.accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar; everything routes through the module-level ops
    def __add__(self, other): return add(self, other)
    def __sub__(self, other): return sub(self, other)
    def __mul__(self, other): return mul(self, other)
    def __neg__(self): return scale(self, -1.0)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.shape}, dtype={self.data.dtype})"


def _toposort(root: Tensor) -> list[Tensor]:
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
    return order


def tensor(x, dtype=np.float64) -> Tensor:
    """Wrap a value as a leaf node."""
    return Tensor(np.asarray(x, dtype=dtype))


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise AutodiffError("at least one operand must be a Tensor")
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.data.dtype))
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.data.dtype))
    return a, b


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_broadcast("add", a, b)
    out = Tensor(a.data + b.data, (a, b), "add")

    def backward(g):
        a.accumulate(_unbroadcast(g, a.shape))
        b.accumulate(_unbroadcast(g, b.shape))
    out._backward = backward
    return out


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_broadcast("sub", a, b)
    out = Tensor(a.data - b.data, (a, b), "sub")

    def backward(g):
        a.accumulate(_unbroadcast(g, a.shape))
        b.accumulate(_unbroadcast(-g, b.shape))
    out._backward = backward
    return out


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_broadcast("mul", a, b)
    out = Tensor(a.data * b.data, (a, b), "mul")

    def backward(g):
        a.accumulate(_unbroadcast(g * b.data, a.shape))
        b.accumulate(_unbroadcast(g * a.data, b.shape))
    out._backward = backward
    return out


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor(a.data * s, (a,), "scale")

    def backward(g):
        a.accumulate(g * s)
    out._backward = backward
    return out


# ---------------------------------------------------------------------------
# matmul and shape ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch("matmul", a.shape, b.shape)
    out = Tensor(a.data @ b.data, (a, b), "matmul")

    def backward(g):
        a.accumulate(g @ b.data.T)
        b.accumulate(a.data.T @ g)
    out._backward = backward
    return out


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = Tensor(a.data.reshape(shape), (a,), "reshape")

    def backward(g):
        a.accumulate(g.reshape(a.shape))
    out._backward = backward
    return out


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        data = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeMismatch("broadcast", a.shape, shape) from None
    out = Tensor(data, (a,), "broadcast")

    def backward(g):
        a.accumulate(_unbroadcast(g, a.shape))
    out._backward = backward
    return out


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise AutodiffError("concat of an empty sequence")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                 tuple(tensors), "concat")
    sizes = [t.shape[axis] for t in tensors]

    def backward(g):
        splits = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
        for t, piece in zip(tensors, splits):
            t.accumulate(piece)
    out._backward = backward
    return out


def slice_(a: Tensor, key) -> Tensor:
    """Basic (non-fancy) slicing; gradient scatters back into place."""
    out = Tensor(a.data[key].copy(), (a,), "slice")

    def backward(g):
        buf = np.zeros_like(a.data)
        buf[key] = g
        a.accumulate(buf)
    out._backward = backward
    return out


# ---------------------------------------------------------------------------
# nonlinearities

def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0), (a,), "relu")

    def backward(g):
        a.accumulate(g * (a.data > 0))
    out._backward = backward
    return out


def leaky_relu(a: Tensor, alpha: float = 0.2) -> Tensor:
    out = Tensor(np.where(a.data > 0, a.data, alpha * a.data), (a,), "leaky_relu")

    def backward(g):
        a.accumulate(g * np.where(a.data > 0, 1.0, alpha))
    out._backward = backward
    return out


def tanh(a: Tensor) -> Tensor:
    out = Tensor(np.tanh(a.data), (a,), "tanh")

    def backward(g):
        a.accumulate(g * (1.0 - out.data * out.data))
    out._backward = backward
    return out


def exp(a: Tensor) -> Tensor:
    # overflow produces inf and is rejected by the node check
    with np.errstate(over="ignore"):
        out = Tensor(np.exp(a.data), (a,), "exp")

    def backward(g):
        a.accumulate(g * out.data)
    out._backward = backward
    return out


def log(a: Tensor) -> Tensor:
    # log(x<=0) yields a non-finite value and is rejected by the node check
    with np.errstate(divide="ignore", invalid="ignore"):
        out = Tensor(np.log(a.data), (a,), "log")

    def backward(g):
        a.accumulate(g / a.data)
    out._backward = backward
    return out


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    p = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = Tensor(p, (a,), "sigmoid")

    def backward(g):
        a.accumulate(g * out.data * (1.0 - out.data))
    out._backward = backward
    return out


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = Tensor(np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x))), (a,), "softplus")

    def backward(g):
        s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                     np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        a.accumulate(g * s)
    out._backward = backward
    return out


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, max-shifted for stability."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p, (a,), "softmax")

    def backward(g):
        dot = (g * out.data).sum(axis=-1, keepdims=True)
        a.accumulate(out.data * (g - dot))
    out._backward = backward
    return out


def plogp(a: Tensor) -> Tensor:
    """Elementwise x*ln(x) with the 0*ln(0)=0 convention; domain x >= 0.

    The gradient at exactly 0 is defined as 0 (the correct limit once chained
    through a softmax, whose own jacobian vanishes there).
    """
    x = a.data
    if np.any(x < 0):
        raise AutodiffError("plogp: negative input")
    with np.errstate(divide="ignore", invalid="ignore"):
        val = np.where(x > 0, x * np.log(np.where(x > 0, x, 1.0)), 0.0)
    out = Tensor(val, (a,), "plogp")

    def backward(g):
        with np.errstate(divide="ignore"):
            d = np.where(x > 0, np.log(np.where(x > 0, x, 1.0)) + 1.0, 0.0)
        a.accumulate(g * d)
    out._backward = backward
    return out


# ---------------------------------------------------------------------------
# reductions

def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


def _reduce_sum(x: np.ndarray, axes) -> np.ndarray:
    # float32 reductions accumulate in float64: entropy terms are means over
    # h*w positions and lose digits otherwise
    if x.dtype == np.float32:
        return x.sum(axis=axes, dtype=np.float64).astype(np.float32)
    return x.sum(axis=axes)


def sum_(a: Tensor, axis=None) -> Tensor:
    axes = _axis_tuple(axis, a.data.ndim)
    out = Tensor(np.asarray(_reduce_sum(a.data, axes)), (a,), "sum")

    def backward(g):
        a.accumulate(np.broadcast_to(np.expand_dims(g, axes), a.shape))
    out._backward = backward
    return out


def mean(a: Tensor, axis=None) -> Tensor:
    axes = _axis_tuple(axis, a.data.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    out = Tensor(np.asarray(_reduce_sum(a.data, axes) / count), (a,), "mean")

    def backward(g):
        a.accumulate(np.broadcast_to(np.expand_dims(g, axes), a.shape) / count)
    out._backward = backward
    return out


# ---------------------------------------------------------------------------
# convolutions (channel-last: x is (N,H,W,C), kernels are (kh,kw,Cin,Cout))

def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    n, h, w, c = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    s0, s1, s2, s3 = x.strides
    view = np.lib.stride_tricks.as_strided(
        x, (n, ho, wo, kh, kw, c), (s0, s1 * stride, s2 * stride, s1, s2, s3))
    return np.ascontiguousarray(view)


def _col2im(cols: np.ndarray, h: int, w: int, stride: int, pad: int) -> np.ndarray:
    n, ho, wo, kh, kw, c = cols.shape
    buf = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            buf[:, i:i + ho * stride:stride, j:j + wo * stride:stride, :] += cols[:, :, :, i, j, :]
    if pad:
        buf = buf[:, pad:pad + h, pad:pad + w, :]
    return buf


def _conv_out_dim(size: int, k: int, stride: int, pad: int) -> int:
    out = (size + 2 * pad - k) // stride + 1
    if out < 1:
        raise AutodiffError(f"conv2d: kernel {k} too large for size {size} with pad {pad}")
    return out


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeMismatch("conv2d", x.shape, w.shape)
    if stride not in (1, 2):
        raise AutodiffError(f"conv2d: stride {stride} unsupported")
    n, h, wid, cin = x.shape
    kh, kw, _, cout = w.shape
    ho = _conv_out_dim(h, kh, stride, pad)
    wo = _conv_out_dim(wid, kw, stride, pad)
    cols = _im2col(x.data, kh, kw, stride, pad)            # (n,ho,wo,kh,kw,cin)
    cols2 = cols.reshape(n * ho * wo, kh * kw * cin)
    w2 = w.data.reshape(kh * kw * cin, cout)
    out = Tensor((cols2 @ w2).reshape(n, ho, wo, cout), (x, w), "conv2d")

    def backward(g):
        g2 = g.reshape(n * ho * wo, cout)
        w.accumulate((cols2.T @ g2).reshape(w.shape))
        gcols = (g2 @ w2.T).reshape(n, ho, wo, kh, kw, cin)
        x.accumulate(_col2im(gcols, h, wid, stride, pad))
    out._backward = backward
    return out


def conv2d_transpose(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Transposed conv: output spatial size (h-1)*stride - 2*pad + k."""
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeMismatch("conv2d_transpose", x.shape, w.shape)
    if stride not in (1, 2):
        raise AutodiffError(f"conv2d_transpose: stride {stride} unsupported")
    n, h, wid, cin = x.shape
    kh, kw, _, cout = w.shape
    ho = (h - 1) * stride - 2 * pad + kh
    wo = (wid - 1) * stride - 2 * pad + kw
    if ho < 1 or wo < 1:
        raise AutodiffError("conv2d_transpose: empty output")
    x2 = x.data.reshape(n * h * wid, cin)
    wt = w.data.transpose(2, 0, 1, 3).reshape(cin, kh * kw * cout)
    cols = (x2 @ wt).reshape(n, h, wid, kh, kw, cout)
    out = Tensor(_col2im(cols, ho, wo, stride, pad), (x, w), "conv2d_transpose")

    def backward(g):
        gcols = _im2col(g, kh, kw, stride, pad)            # (n,h,wid,kh,kw,cout)
        gcols2 = gcols.reshape(n * h * wid, kh * kw * cout)
        x.accumulate((gcols2 @ wt.T).reshape(x.shape))
        gw = (x2.T @ gcols2).reshape(cin, kh, kw, cout).transpose(1, 2, 0, 3)
        w.accumulate(gw)
    out._backward = backward
    return out


# ---------------------------------------------------------------------------
# gradient routing

def stop_gradient(a: Tensor) -> Tensor:
    """Value-identical, contributes zero gradient to its input."""
    return Tensor(a.data, (), "stop_gradient")


def straight_through(u: Tensor, hard_values: np.ndarray) -> Tensor:
    """Forward the quantized values exactly; route the gradient to u unchanged."""
    if tuple(hard_values.shape) != u.shape:
        raise ShapeMismatch("straight_through", u.shape, hard_values.shape)
    out = Tensor(hard_values.astype(u.data.dtype), (u,), "straight_through")

    def backward(g):
        u.accumulate(g)
    out._backward = backward
    return out
