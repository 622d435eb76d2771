"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Every differentiable op records its
parents and a closure mapping the output gradient to one gradient per parent;
:meth:`Tensor.backward` replays those closures in reverse topological order.

Feature maps are unbatched ``[C, H, W]`` arrays throughout.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import DimensionError, NumericError, UsageError

_state = {"dtype": np.dtype(np.float32), "grad": True, "macs": None}


def get_default_dtype() -> np.dtype:
    return _state["dtype"]


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise UsageError(f"unsupported precision {dtype}; use float32 or float64")
    _state["dtype"] = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the precision used for new tensors."""
    prev = _state["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference, cache bookkeeping)."""
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


def is_grad_enabled() -> bool:
    return _state["grad"]


@contextlib.contextmanager
def count_macs():
    """Tally multiply-accumulates performed by matmul and conv2d.

    Yields a dict whose ``"total"`` entry grows as ops execute; per-op totals
    are kept under ``"matmul"`` and ``"conv2d"``.
    """
    prev = _state["macs"]
    tally = {"total": 0, "matmul": 0, "conv2d": 0}
    _state["macs"] = tally
    try:
        yield tally
    finally:
        _state["macs"] = prev


def _tally(kind: str, n: int) -> None:
    tally = _state["macs"]
    if tally is not None:
        tally[kind] += int(n)
        tally["total"] += int(n)


class Tensor:
    """n-dimensional array that can participate in backpropagation."""

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, (np.ndarray, np.generic)) and data.dtype.kind == "f":
                dtype = data.dtype
            else:
                dtype = _state["dtype"]
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = ""

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- autodiff -----------------------------------------------------------
    def _topo_order(self) -> list["Tensor"]:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return order

    def backward(self, retain_graph: bool = False) -> None:
        """Populate ``.grad`` on every ancestor of this scalar.

        Gradients accumulate: calling backward again (on a retained graph or
        a fresh forward pass) without zeroing adds to existing ``.grad``.
        The graph is released afterwards unless ``retain_graph`` is set.
        """
        if self.data.size != 1:
            raise UsageError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise UsageError("backward() on a tensor that does not require grad")
        order = self._topo_order()
        pending = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg
        if not retain_graph:
            for node in order:
                node._parents = ()
                node._backward = None

    # -- operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _lift(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or _state["dtype"]))


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, backward: Callable) -> Tensor:
    out = Tensor(data)
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, _lift(b, a.dtype)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return _lift(a, b.dtype), b
    return _lift(a), _lift(b)


# -- elementwise arithmetic ---------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(a.data + b.data, (a, b), "add",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(a.data - b.data, (a, b), "sub",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(a.data * b.data, (a, b), "mul",
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(a.data / b.data, (a, b), "div",
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), "neg", lambda g: (-g,))


def power(a: Tensor, p: float) -> Tensor:
    return _make(a.data ** p, (a,), "pow", lambda g: (g * p * a.data ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make(y, (a,), "exp", lambda g: (g * y,))


def tabs(a: Tensor) -> Tensor:
    """Absolute value; subgradient 0 at the kink."""
    return _make(np.abs(a.data), (a,), "abs", lambda g: (g * np.sign(a.data),))


def _gelu_derivative(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return cdf + x * pdf


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    x = a.data
    y = (0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))).astype(x.dtype, copy=False)
    # looked up at call time so tests can corrupt it
    return _make(y, (a,), "gelu", lambda g: (g * _gelu_derivative(x).astype(x.dtype, copy=False),))


# -- reductions and shape ops ---------------------------------------------------
def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    y = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(y), (a,), "sum", backward)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), "transpose", lambda g: (g.transpose(inv),))


def _is_basic_index(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (int, slice)) or k is Ellipsis or k is None for k in parts)


def getitem(a: Tensor, key) -> Tensor:
    y = a.data[key]
    basic = _is_basic_index(key)

    def backward(g):
        dx = np.zeros_like(a.data)
        if basic:
            dx[key] += g
        else:
            np.add.at(dx, key, g)
        return (dx,)

    return _make(np.array(y, copy=True), (a,), "getitem", backward)


def take(a: Tensor, index, axis: int = 0) -> Tensor:
    """Gather slices along ``axis``; index is constant (no gradient)."""
    index = np.asarray(index, dtype=np.intp)

    def backward(g):
        dx = np.zeros_like(a.data)
        moved = np.moveaxis(dx, axis, 0)
        np.add.at(moved, index, np.moveaxis(g, axis, 0))
        return (dx,)

    return _make(np.take(a.data, index, axis=axis), (a,), "take", backward)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat", backward)


# -- linear algebra -------------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    y = a.data @ b.data
    _tally("matmul", y.size * a.shape[-1])

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(y, (a, b), "matmul", backward)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation of a ``[C_in, H, W]`` map (no kernel flip).

    ``weight`` is ``[C_out, C_in/groups, kh, kw]``. Depthwise is
    ``groups == C_in``.
    """
    if x.ndim != 3 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects [C,H,W] input and 4-d kernel, got {x.shape} and {weight.shape}")
    c_in, h, w = x.shape
    c_out, cin_g, kh, kw = weight.shape
    if groups < 1 or c_in % groups or c_out % groups or cin_g != c_in // groups:
        raise DimensionError(
            f"conv2d groups={groups} incompatible with input {x.shape} and kernel {weight.shape}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if padding < 0 or ho < 1 or wo < 1:
        raise DimensionError(f"conv2d padding={padding} gives empty output for input {x.shape}")
    cout_g = c_out // groups
    k = cin_g * kh * kw
    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0
    if pointwise:
        cols = x.data.reshape(groups, cin_g, h * w)
    else:
        xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
        win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
        cols = (win.reshape(groups, cin_g, ho, wo, kh, kw)
                .transpose(0, 1, 4, 5, 2, 3)
                .reshape(groups, k, ho * wo))
    wmat = weight.data.reshape(groups, cout_g, k)
    y = np.matmul(wmat, cols).reshape(c_out, ho, wo)
    _tally("conv2d", c_out * k * ho * wo)
    parents = (x, weight) if bias is None else (x, weight, bias)
    if bias is not None:
        y = y + bias.data[:, None, None]

    def backward(g):
        g3 = g.reshape(groups, cout_g, ho * wo)
        gw = np.matmul(g3, np.swapaxes(cols, 1, 2)).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            dcols = np.matmul(np.swapaxes(wmat, 1, 2), g3)
            if pointwise:
                gx = dcols.reshape(x.shape)
            else:
                dcols = dcols.reshape(c_in, kh, kw, ho, wo)
                dxp = np.zeros((c_in, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
                hspan = stride * (ho - 1) + 1
                wspan = stride * (wo - 1) + 1
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, i:i + hspan:stride, j:j + wspan:stride] += dcols[:, i, j]
                gx = dxp[:, padding:padding + h, padding:padding + w]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(1, 2))

    return _make(y, parents, "conv2d", backward)


# -- normalisation and attention primitives --------------------------------------------
def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``."""
    x = a.data
    if not np.all(np.isfinite(x)):
        raise NumericError("softmax received non-finite input")
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (a,), "softmax", backward)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise a ``[C, H, W]`` map across channels at each spatial position."""
    if a.ndim != 3 or gain.shape != (a.shape[0],) or bias.shape != (a.shape[0],):
        raise DimensionError(f"layer_norm: input {a.shape}, gain {gain.shape}, bias {bias.shape}")
    x = a.data
    c = x.shape[0]
    mu = x.mean(axis=0, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=0, keepdims=True) + eps)
    xhat = xc * inv
    gv = gain.data[:, None, None]
    y = xhat * gv + bias.data[:, None, None]

    def backward(g):
        dxhat = g * gv
        dx = inv / c * (c * dxhat - dxhat.sum(axis=0, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=0, keepdims=True))
        return dx, (g * xhat).sum(axis=(1, 2)), g.sum(axis=(1, 2))

    return _make(y, (a, gain, bias), "layer_norm", backward)


def l2_normalize(a: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Scale slices along ``axis`` to unit Euclidean norm."""
    x = a.data
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    y = x / denom

    def backward(g):
        proj = (g * y).sum(axis=axis, keepdims=True)
        return (np.where(norm > eps, (g - y * proj) / denom, g / denom),)

    return _make(y, (a,), "l2_normalize", backward)


def _shuffle(x: np.ndarray, r: int) -> np.ndarray:
    c, h, w = x.shape
    return x.reshape(c // (r * r), r, r, h, w).transpose(0, 3, 1, 4, 2).reshape(c // (r * r), h * r, w * r)


def _unshuffle(x: np.ndarray, r: int) -> np.ndarray:
    c, h, w = x.shape
    return x.reshape(c, h // r, r, w // r, r).transpose(0, 2, 4, 1, 3).reshape(c * r * r, h // r, w // r)


def pixel_unshuffle(a: Tensor, r: int = 2) -> Tensor:
    """``[C, H, W] -> [C*r*r, H/r, W/r]``, channel index ``c*r*r + i*r + j``."""
    if a.ndim != 3 or a.shape[1] % r or a.shape[2] % r:
        raise DimensionError(f"pixel_unshuffle: spatial extents of {a.shape} not divisible by {r}")
    return _make(_unshuffle(a.data, r), (a,), "pixel_unshuffle", lambda g: (_shuffle(g, r),))


def pixel_shuffle(a: Tensor, r: int = 2) -> Tensor:
    """Inverse of :func:`pixel_unshuffle`."""
    if a.ndim != 3 or a.shape[0] % (r * r):
        raise DimensionError(f"pixel_shuffle: channel extent of {a.shape} not divisible by {r * r}")
    return _make(_shuffle(a.data, r), (a,), "pixel_shuffle", lambda g: (_unshuffle(g, r),))
