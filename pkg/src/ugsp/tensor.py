"""Dense tensors with reverse-mode automatic differentiation.

Values are numpy arrays, float32 by default; passing float64 inputs keeps
the whole graph in float64, which is what the finite-difference gradient
checks use. Gradients accumulate (+=) into leaf tensors, so two backward
passes without zeroing double the stored gradients.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericalError

_GRAD_ENABLED = True
_DEBUG_CHECKS = False


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def set_debug_checks(flag: bool) -> None:
    """When on, every op output is checked for NaN/Inf and raises early."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(flag)


def _coerce(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """A value node. Leaf tensors with requires_grad accumulate into .grad."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False,
                 _parents: tuple = (), _backward: Callable | None = None):
        self.data = _coerce(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward_fn = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # arithmetic sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)


class Parameter(Tensor):
    """A named trainable leaf with a persistent, zero-initialized gradient."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracking(*ts: Tensor) -> bool:
    return _GRAD_ENABLED and any(t.requires_grad for t in ts)


def _finish(data: np.ndarray, parents: tuple, bwd: Callable | None) -> Tensor:
    if _DEBUG_CHECKS and not np.all(np.isfinite(data)):
        raise NumericalError("non-finite value produced by an operation")
    if bwd is None:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=bwd)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    if not _tracking(a, b):
        return _finish(out, (), None)

    def bwd(g):
        return ((a, _unbroadcast(g, a.data.shape)),
                (b, _unbroadcast(g, b.data.shape)))

    return _finish(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    if not _tracking(a, b):
        return _finish(out, (), None)

    def bwd(g):
        return ((a, _unbroadcast(g, a.data.shape)),
                (b, _unbroadcast(-g, b.data.shape)))

    return _finish(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    if not _tracking(a, b):
        return _finish(out, (), None)

    def bwd(g):
        return ((a, _unbroadcast(g * b.data, a.data.shape)),
                (b, _unbroadcast(g * a.data, b.data.shape)))

    return _finish(out, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    if not _tracking(a, b):
        return _finish(out, (), None)

    def bwd(g):
        return ((a, _unbroadcast(g / b.data, a.data.shape)),
                (b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)))

    return _finish(out, (a, b), bwd)


def neg(a) -> Tensor:
    a = as_tensor(a)
    if not _tracking(a):
        return _finish(-a.data, (), None)
    return _finish(-a.data, (a,), lambda g: ((a, -g),))


def custom_unary(a: Tensor, fwd: Callable, dfdx: Callable) -> Tensor:
    """y = fwd(x) with analytic derivative dfdx(x) (elementwise)."""
    a = as_tensor(a)
    out = fwd(a.data)
    if not _tracking(a):
        return _finish(out, (), None)
    return _finish(out, (a,), lambda g: ((a, g * dfdx(a.data)),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    if not _tracking(a):
        return _finish(out, (), None)
    return _finish(out, (a,), lambda g: ((a, g * out),))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    if not _tracking(a):
        return _finish(out, (), None)
    return _finish(out, (a,), lambda g: ((a, g * (0.5 / out)),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # numerically stable in both tails
    out = np.where(a.data >= 0,
                   1.0 / (1.0 + np.exp(-np.clip(a.data, 0, None))),
                   np.exp(np.clip(a.data, None, 0)) / (1.0 + np.exp(np.clip(a.data, None, 0))))
    out = out.astype(a.data.dtype)
    if not _tracking(a):
        return _finish(out, (), None)
    return _finish(out, (a,), lambda g: ((a, g * out * (1.0 - out)),))


def abs_(a) -> Tensor:
    """|x| with subgradient 0 at x = 0."""
    return custom_unary(as_tensor(a), np.abs, np.sign)


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clamp with pass-through gradient strictly inside [lo, hi]."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    if not _tracking(a):
        return _finish(out, (), None)
    inside = ((a.data >= lo) & (a.data <= hi)).astype(a.data.dtype)
    return _finish(out, (a,), lambda g: ((a, g * inside),))


def prelu(x, slope) -> Tensor:
    """y = x for x >= 0 else slope*x; slope is per-channel, shape (C,)."""
    x, slope = as_tensor(x), as_tensor(slope)
    s4 = slope.data.reshape(1, -1, 1, 1)
    if x.data.shape[1] != s4.shape[1]:
        raise DimensionError(
            f"prelu slope has {s4.shape[1]} channels, input has shape {x.data.shape}")
    pos = x.data >= 0
    out = np.where(pos, x.data, x.data * s4)
    if not _tracking(x, slope):
        return _finish(out, (), None)

    def bwd(g):
        dx = g * np.where(pos, x.data.dtype.type(1), s4)
        ds = (g * np.where(pos, 0, x.data)).sum(axis=(0, 2, 3))
        return ((x, dx), (slope, ds))

    return _finish(out, (x, slope), bwd)


def elu(x) -> Tensor:
    """y = x for x >= 0 else exp(x) - 1 (alpha fixed at 1)."""
    x = as_tensor(x)
    neg_part = np.exp(np.minimum(x.data, 0)) - 1.0
    pos = x.data >= 0
    out = np.where(pos, x.data, neg_part).astype(x.data.dtype)
    if not _tracking(x):
        return _finish(out, (), None)
    dfdx = np.where(pos, x.data.dtype.type(1), neg_part + 1.0)
    return _finish(out, (x,), lambda g: ((x, g * dfdx),))


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    if not _tracking(a):
        return _finish(out, (), None)

    def bwd(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((a, np.broadcast_to(g, a.data.shape).copy()),)

    return _finish(out, (a,), bwd)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / out.size
    if not _tracking(a):
        return _finish(out, (), None)

    def bwd(g):
        g = np.asarray(g) / count
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((a, np.broadcast_to(g, a.data.shape).copy()),)

    return _finish(out, (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    if not _tracking(*tensors):
        return _finish(out, (), None)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        parts = np.split(g, splits, axis=axis)
        return tuple(zip(tensors, parts))

    return _finish(out, tuple(tensors), bwd)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis; gradient scatters back zero-padded."""
    a = as_tensor(a)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = a.data[idx]
    if not _tracking(a):
        return _finish(out.copy(), (), None)

    def bwd(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return ((a, full),)

    return _finish(out.copy(), (a,), bwd)


def subsample2(a) -> Tensor:
    """Keep every second row/column (pyramid decimation)."""
    a = as_tensor(a)
    out = a.data[:, :, ::2, ::2]
    if not _tracking(a):
        return _finish(out.copy(), (), None)

    def bwd(g):
        full = np.zeros_like(a.data)
        full[:, :, ::2, ::2] = g
        return ((a, full),)

    return _finish(out.copy(), (a,), bwd)


def pad2d(a, pad: int, mode: str = "zero") -> Tensor:
    """Pad the two spatial axes. mode 'zero' or 'edge' (replicate)."""
    a = as_tensor(a)
    if pad == 0:
        return a
    np_mode = "constant" if mode == "zero" else "edge"
    out = np.pad(a.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode=np_mode)
    if not _tracking(a):
        return _finish(out, (), None)

    def bwd(g):
        if mode == "zero":
            return ((a, g[:, :, pad:-pad, pad:-pad].copy()),)
        # adjoint of replicate padding: fold padded strips into the border
        core = g[:, :, pad:-pad, pad:-pad].copy()
        core[:, :, 0, :] += g[:, :, :pad, pad:-pad].sum(axis=2)
        core[:, :, -1, :] += g[:, :, -pad:, pad:-pad].sum(axis=2)
        core[:, :, :, 0] += g[:, :, pad:-pad, :pad].sum(axis=3)
        core[:, :, :, -1] += g[:, :, pad:-pad, -pad:].sum(axis=3)
        core[:, :, 0, 0] += g[:, :, :pad, :pad].sum(axis=(2, 3))
        core[:, :, 0, -1] += g[:, :, :pad, -pad:].sum(axis=(2, 3))
        core[:, :, -1, 0] += g[:, :, -pad:, :pad].sum(axis=(2, 3))
        core[:, :, -1, -1] += g[:, :, -pad:, -pad:].sum(axis=(2, 3))
        return ((a, core),)

    return _finish(out, (a,), bwd)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

_ALLOWED_KERNELS = (1, 3, 4)


def _conv_geometry(h: int, w: int, k: int, stride: int, pad: int):
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    return oh, ow


def _shift_view(xp: np.ndarray, ki: int, kj: int, stride: int, oh: int, ow: int):
    return xp[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride]


def _patches(x: np.ndarray, k: int, stride: int, pad: int):
    """Channel-last patch matrix (N, K*K*C, OH*OW) built by block copies."""
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh, ow = _conv_geometry(h, w, k, stride, pad)
    if k == 1 and stride == 1:
        return x.reshape(n, c, oh * ow), oh, ow
    out = np.empty((n, k * k * c, oh * ow), dtype=x.dtype)
    for t in range(k * k):
        ki, kj = divmod(t, k)
        view = _shift_view(x, ki, kj, stride, oh, ow)
        out[:, t * c:(t + 1) * c] = view.reshape(n, c, oh * ow)
    return out, oh, ow


def _weight2(w: np.ndarray) -> np.ndarray:
    """(Cout, Cin, K, K) -> (Cout, K*K*Cin) in the _patches column order."""
    cout = w.shape[0]
    return np.ascontiguousarray(w.transpose(0, 2, 3, 1).reshape(cout, -1))


def _weight2_inv(dw2: np.ndarray, wshape: tuple) -> np.ndarray:
    cout, cin, k, _ = wshape
    return np.ascontiguousarray(dw2.reshape(cout, k, k, cin).transpose(0, 3, 1, 2))


def _conv_fwd(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    n = x.shape[0]
    cout = w.shape[0]
    pat, oh, ow = _patches(x, w.shape[2], stride, pad)
    return np.matmul(_weight2(w), pat).reshape(n, cout, oh, ow)


def _conv_dx(g: np.ndarray, w: np.ndarray, stride: int, pad: int,
             xshape: tuple) -> np.ndarray:
    """Input-adjoint of _conv_fwd; also the transposed-convolution forward."""
    n, cin, h, wd = xshape
    cout, _, k, _ = w.shape
    oh, ow = _conv_geometry(h, wd, k, stride, pad)
    gflat = g.reshape(n, cout, oh * ow)
    dpat = np.matmul(_weight2(w).T, gflat)  # (n, k*k*cin, oh*ow)
    if k == 1 and stride == 1 and pad == 0:
        return dpat.reshape(n, cin, h, wd)
    buf = np.zeros((n, cin, h + 2 * pad, wd + 2 * pad), dtype=g.dtype)
    for t in range(k * k):
        ki, kj = divmod(t, k)
        view = _shift_view(buf, ki, kj, stride, oh, ow)
        view += dpat[:, t * cin:(t + 1) * cin].reshape(n, cin, oh, ow)
    if pad:
        return np.ascontiguousarray(buf[:, :, pad:-pad, pad:-pad])
    return buf


def _conv_dw(x: np.ndarray, g: np.ndarray, stride: int, pad: int,
             wshape: tuple) -> np.ndarray:
    """Weight-adjoint of _conv_fwd."""
    n = x.shape[0]
    cout, cin, k, _ = wshape
    pat, oh, ow = _patches(x, k, stride, pad)
    gflat = g.reshape(n, cout, oh * ow)
    dw2 = np.matmul(gflat, pat.transpose(0, 2, 1)).sum(axis=0)
    return _weight2_inv(dw2, wshape)


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation), weight layout (Cout, Cin, K, K)."""
    x, w = as_tensor(x), as_tensor(w)
    if b is not None:
        b = as_tensor(b)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError(
            f"conv2d expects rank-4 operands, got x {x.data.shape} and w {w.data.shape}")
    cout, cin, k, k2 = w.data.shape
    if k != k2 or k not in _ALLOWED_KERNELS:
        raise ContractError(f"conv2d kernel must be square with K in {_ALLOWED_KERNELS}, got {w.data.shape}")
    if x.data.shape[1] != cin:
        raise DimensionError(
            f"conv2d channel mismatch: input {x.data.shape} vs weight {w.data.shape}")
    out = _conv_fwd(x.data, w.data, stride, padding)
    if b is not None:
        out += b.data.reshape(1, cout, 1, 1)
    parents = (x, w) if b is None else (x, w, b)
    if not _tracking(*parents):
        return _finish(out, (), None)

    def bwd(g):
        g = np.ascontiguousarray(g)
        grads = [(x, _conv_dx(g, w.data, stride, padding, x.data.shape)),
                 (w, _conv_dw(x.data, g, stride, padding, w.data.shape))]
        if b is not None:
            grads.append((b, g.sum(axis=(0, 2, 3))))
        return tuple(grads)

    return _finish(out, parents, bwd)


def deconv(x, w, b=None, stride: int = 2, padding: int = 1) -> Tensor:
    """Transposed convolution, weight layout (Cin, Cout, K, K).

    With the default 4x4 kernel, stride 2, padding 1 the spatial extent
    doubles exactly; the operator is the adjoint of conv2d at the same
    geometry (the weight is reinterpreted as (Cout_conv=Cin, Cin_conv=Cout)).
    """
    x, w = as_tensor(x), as_tensor(w)
    if b is not None:
        b = as_tensor(b)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError(
            f"deconv expects rank-4 operands, got x {x.data.shape} and w {w.data.shape}")
    cin, cout, k, k2 = w.data.shape
    if k != k2 or k not in _ALLOWED_KERNELS:
        raise ContractError(f"deconv kernel must be square with K in {_ALLOWED_KERNELS}, got {w.data.shape}")
    if x.data.shape[1] != cin:
        raise DimensionError(
            f"deconv channel mismatch: input {x.data.shape} vs weight {w.data.shape}")
    n, _, h, wd = x.data.shape
    oh = (h - 1) * stride + k - 2 * padding
    ow = (wd - 1) * stride + k - 2 * padding
    out = _conv_dx(x.data, w.data, stride, padding, (n, cout, oh, ow))
    if b is not None:
        out += b.data.reshape(1, cout, 1, 1)
    parents = (x, w) if b is None else (x, w, b)
    if not _tracking(*parents):
        return _finish(out, (), None)

    def bwd(g):
        g = np.ascontiguousarray(g)
        grads = [(x, _conv_fwd(g, w.data, stride, padding)),
                 (w, _conv_dw(g, x.data, stride, padding, w.data.shape))]
        if b is not None:
            grads.append((b, g.sum(axis=(0, 2, 3))))
        return tuple(grads)

    return _finish(out, parents, bwd)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited = {id(root)}
    stack: list[tuple[Tensor, Iterable]] = [(root, iter(root._parents))]
    while stack:
        node, it = stack[-1]
        advanced = False
        for p in it:
            if p.requires_grad and id(p) not in visited:
                visited.add(id(p))
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


def backward(loss: Tensor) -> None:
    """Populate gradients of every leaf reachable from a scalar loss.

    Leaf tensors (no parents, requires_grad) accumulate; interior gradients
    live only for the duration of the call.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    # ids of buffers currently stored in `grads`; a backward fn may hand the
    # same array to two parents, so never store one buffer under two keys
    held: set[int] = {id(grads[id(loss)])}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        held.discard(id(g))
        if not node._parents:
            if node.grad is None:
                node.grad = g.copy()
            else:
                node.grad += g
            continue
        if node._backward_fn is None:
            continue
        for parent, pg in node._backward_fn(g):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] += pg
            else:
                if id(pg) in held or not pg.flags.owndata or not pg.flags.writeable:
                    pg = pg.copy()
                grads[key] = pg
                held.add(id(pg))


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        else:
            p.grad[...] = 0
