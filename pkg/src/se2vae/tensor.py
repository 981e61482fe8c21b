"""Dense float tensors with reverse-mode automatic differentiation.

A :class:`Tape` records every differentiable operation in execution order
(which is already a topological order); :func:`backward` replays it in
reverse, accumulating gradients into leaf tensors. Tensors are numpy-backed;
the default dtype is float32, with a float64 shadow mode (see
``default_dtype``) used by the gradient-check harness.

Convolution is lowered to im2col + matrix multiply through the kernel
backend; the naive loop version lives only in the test suite as an oracle.
"""

from __future__ import annotations

import contextlib
import os
from typing import Callable, Optional, Sequence

import numpy as np

from .backend import kernels

_DEFAULT_DTYPE = np.float32
_DEBUG_FINITE = os.environ.get("SE2VAE_DEBUG") == "1"
_TAPE_STACK: list["Tape"] = []


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype used for new tensors."""
    global _DEFAULT_DTYPE
    old = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = dtype
    try:
        yield
    finally:
        _DEFAULT_DTYPE = old


def current_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    """A dense array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.item())

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _wrap(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_wrap(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, _wrap(other, self.dtype))


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Append-only record of operations; append order is topological."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def reset(self) -> None:
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)


@contextlib.contextmanager
def tape():
    """Activate a fresh tape; ops inside the block are recorded on it."""
    t = Tape()
    _TAPE_STACK.append(t)
    try:
        yield t
    finally:
        _TAPE_STACK.pop()


@contextlib.contextmanager
def no_grad():
    """Disable recording inside the block."""
    _TAPE_STACK.append(None)  # type: ignore[arg-type]
    try:
        yield
    finally:
        _TAPE_STACK.pop()


def _active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _record(out: Tensor, inputs: Sequence[Tensor],
            backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    if _DEBUG_FINITE and not np.all(np.isfinite(out.data)):
        raise FloatingPointError("non-finite values produced by an operation")
    t = _active_tape()
    if t is not None and any(i.requires_grad for i in inputs):
        out.requires_grad = True
        t.nodes.append(_Node(out, tuple(inputs), backward))
    return out


def backward(loss: Tensor, tape_obj: Optional[Tape] = None) -> None:
    """Accumulate (+=) gradients of a scalar loss into all reachable leaves.

    Calling twice without zeroing doubles the leaf gradients.
    """
    if loss.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    t = tape_obj or _active_tape()
    if t is None:
        raise RuntimeError("backward requires an active tape")
    acc: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    owners: dict[int, Tensor] = {id(loss): loss}
    produced = {id(n.out) for n in t.nodes}
    for node in reversed(t.nodes):
        g = acc.pop(id(node.out), None)
        owners.pop(id(node.out), None)
        if g is None:
            continue
        grads = node.backward(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in acc:
                acc[key] = acc[key] + gi
            else:
                acc[key] = gi
                owners[key] = inp
    for key, g in acc.items():
        leaf = owners[key]
        if key in produced or not leaf.requires_grad:
            continue
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data, dtype=a.dtype)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape),
                                           _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data, dtype=a.dtype)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape),
                                           _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data, dtype=a.dtype)
    return _record(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape),
                                           _unbroadcast(g * a.data, b.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data / b.data, dtype=a.dtype)

    def back(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _record(out, (a, b), back)


def neg(a: Tensor) -> Tensor:
    return _record(Tensor(-a.data, dtype=a.dtype), (a,), lambda g: (-g,))


def power(a: Tensor, p: float) -> Tensor:
    out = Tensor(a.data ** p, dtype=a.dtype)
    return _record(out, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data), dtype=a.dtype)
    return _record(out, (a,), lambda g: (g * out.data,))


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data), dtype=a.dtype)
    return _record(out, (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = Tensor(np.sqrt(a.data), dtype=a.dtype)
    return _record(out, (a,), lambda g: (g / (2.0 * out.data),))


def absolute(a: Tensor) -> Tensor:
    out = Tensor(np.abs(a.data), dtype=a.dtype)
    return _record(out, (a,), lambda g: (g * np.sign(a.data),))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    out = Tensor(np.clip(a.data, lo, hi), dtype=a.dtype)
    mask = (a.data >= lo) & (a.data <= hi)
    return _record(out, (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    out = Tensor(1.0 / (1.0 + np.exp(-a.data)), dtype=a.dtype)
    return _record(out, (a,), lambda g: (g * out.data * (1.0 - out.data),))


def leaky_relu(a: Tensor, slope: float = 0.1) -> Tensor:
    """x for x >= 0, slope*x otherwise."""
    mask = a.data >= 0
    out = Tensor(np.where(mask, a.data, slope * a.data), dtype=a.dtype)
    return _record(out, (a,), lambda g: (g * np.where(mask, 1.0, slope),))


def relu(a: Tensor) -> Tensor:
    return leaky_relu(a, 0.0)


def softmax_axis(a: Tensor, axis: int) -> Tensor:
    """Numerically stable softmax; rows along `axis` sum to 1."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = Tensor(e / e.sum(axis=axis, keepdims=True), dtype=a.dtype)

    def back(g):
        go = g * out.data
        return (go - out.data * go.sum(axis=axis, keepdims=True),)

    return _record(out, (a,), back)


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape), dtype=a.dtype)
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    out = Tensor(a.data.transpose(axes), dtype=a.dtype)
    return _record(out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                 dtype=tensors[0].dtype)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _record(out, tuple(tensors), back)


def stack(tensors: Sequence[Tensor], axis: int) -> Tensor:
    out = Tensor(np.stack([t.data for t in tensors], axis=axis),
                 dtype=tensors[0].dtype)

    def back(g):
        parts = np.split(g, len(tensors), axis=axis)
        return tuple(np.ascontiguousarray(np.squeeze(p, axis=axis)) for p in parts)

    return _record(out, tuple(tensors), back)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), dtype=a.dtype)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)

    return _record(out, (a,), back)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / float(count))


def amax(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max along an axis; gradient routes to the first argmax (row-major ties)."""
    idx = np.argmax(a.data, axis=axis)
    out_data = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)
    if not keepdims:
        out_data = np.squeeze(out_data, axis=axis)
    out = Tensor(out_data, dtype=a.dtype)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        dx = np.zeros_like(a.data)
        np.put_along_axis(dx, np.expand_dims(idx, axis), g, axis=axis)
        return (dx,)

    return _record(out, (a,), back)


def roll(a: Tensor, shift: int, axis: int) -> Tensor:
    out = Tensor(np.roll(a.data, shift, axis=axis), dtype=a.dtype)
    return _record(out, (a,), lambda g: (np.roll(g, -shift, axis=axis),))


def take(a: Tensor, indices, axis: int) -> Tensor:
    indices = np.asarray(indices)
    out = Tensor(np.take(a.data, indices, axis=axis), dtype=a.dtype)

    def back(g):
        dx = np.zeros_like(a.data)
        np.add.at(dx, (slice(None),) * axis + (indices,), g)
        return (dx,)

    return _record(out, (a,), back)


def gather_last(a: Tensor, idx: np.ndarray) -> Tensor:
    """Pick one element along the last axis per leading position."""
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor(np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0],
                 dtype=a.dtype)

    def back(g):
        dx = np.zeros_like(a.data)
        np.put_along_axis(dx, idx[..., None], g[..., None], axis=-1)
        return (dx,)

    return _record(out, (a,), back)


def cumsum_last(a: Tensor) -> Tensor:
    out = Tensor(np.cumsum(a.data, axis=-1), dtype=a.dtype)

    def back(g):
        return (np.flip(np.cumsum(np.flip(g, -1), -1), -1).copy(),)

    return _record(out, (a,), back)


def broadcast_to(a: Tensor, shape) -> Tensor:
    out = Tensor(np.broadcast_to(a.data, shape).copy(), dtype=a.dtype)
    return _record(out, (a,), lambda g: (_unbroadcast(g, a.shape),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(np.matmul(a.data, b.data), dtype=a.dtype)

    def back(g):
        da = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        db = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return (da, db)

    return _record(out, (a, b), back)


# ---------------------------------------------------------------------------
# spatial ops


def _conv_out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (B,C,H,W) with kernels (O,C,k,k)."""
    b, c, h, wd = x.shape
    o, ck, k, k2 = w.shape
    if k != k2:
        raise ValueError(f"kernel must be square, got {w.shape}")
    if ck != c:
        raise ValueError(f"channel mismatch: input {x.shape} vs kernel {w.shape}")
    if k > h + 2 * padding or k > wd + 2 * padding:
        raise ValueError(f"kernel {k} larger than padded input {x.shape}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    ho = _conv_out_size(h, k, stride, padding)
    wo = _conv_out_size(wd, k, stride, padding)
    cols = kernels.im2col(np.ascontiguousarray(x.data), k, stride, padding)
    wflat = w.data.reshape(o, c * k * k)
    out = Tensor(np.matmul(wflat, cols).reshape(b, o, ho, wo), dtype=x.dtype)

    def back(g):
        # one big GEMM each for dw and dcols instead of a batch of small
        # ones: (o, b*hw) and (b*hw, ckk) views keep BLAS saturated
        gbig = np.ascontiguousarray(g.reshape(b, o, ho * wo)
                                    .transpose(1, 0, 2)).reshape(o, -1)
        cbig = np.ascontiguousarray(cols.transpose(1, 0, 2)) \
            .reshape(c * k * k, -1)
        dw = np.matmul(gbig, cbig.T).reshape(w.shape)
        dcols = np.matmul(wflat.T, gbig).reshape(c * k * k, b, ho * wo) \
            .transpose(1, 0, 2)
        dx = kernels.col2im(np.ascontiguousarray(dcols), h, wd, k, stride, padding)
        return (dx, dw)

    return _record(out, (x, w), back)


def transposed_conv2d(x: Tensor, w: Tensor, stride: int = 1,
                      padding: int = 0) -> Tensor:
    """Adjoint of conv2d: (B,C,H,W) with kernels (C,O,k,k) -> (B,O,H',W')."""
    b, c, h, wd = x.shape
    cw, o, k, k2 = w.shape
    if k != k2:
        raise ValueError(f"kernel must be square, got {w.shape}")
    if cw != c:
        raise ValueError(f"channel mismatch: input {x.shape} vs kernel {w.shape}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    ho = (h - 1) * stride - 2 * padding + k
    wo = (wd - 1) * stride - 2 * padding + k
    if ho < 1 or wo < 1:
        raise ValueError(f"output would be empty for input {x.shape}, kernel {k}, "
                         f"stride {stride}, padding {padding}")
    wflat = w.data.reshape(c, o * k * k)
    xflat = x.data.reshape(b, c, h * wd)
    cols = np.matmul(wflat.T, xflat)
    out = Tensor(kernels.col2im(np.ascontiguousarray(cols), ho, wo, k, stride, padding),
                 dtype=x.dtype)

    def back(g):
        gcols = kernels.im2col(np.ascontiguousarray(g), k, stride, padding)
        gbig = np.ascontiguousarray(gcols.transpose(1, 0, 2)) \
            .reshape(o * k * k, -1)
        dx = np.matmul(wflat, gbig).reshape(c, b, h * wd) \
            .transpose(1, 0, 2).reshape(x.shape)
        xbig = np.ascontiguousarray(xflat.transpose(1, 0, 2)).reshape(c, -1)
        dw = np.matmul(xbig, gbig.T).reshape(w.shape)
        return (dx, dw)

    return _record(out, (x, w), back)


def max_pool2d(x: Tensor) -> Tensor:
    """Stride-2 spatial max pooling halving each axis (rounding up).

    Even axes use 2x2 windows; odd axes use centered 3x3 windows with -inf
    padding, which keeps the pooling exactly equivariant to quarter-turn
    rotations on both parities. Gradients route to the first (row-major)
    argmax of each window.
    """
    b, c, h, w = x.shape
    kh, ph = (2, 0) if h % 2 == 0 else (3, 1)
    kw, pw = (2, 0) if w % 2 == 0 else (3, 1)
    xc = np.ascontiguousarray(x.data)
    out_data, idx = kernels.maxpool(xc, kh, kw, 2, 2, ph, pw)
    out = Tensor(out_data, dtype=x.dtype)

    def back(g):
        dx = kernels.maxpool_backward(np.ascontiguousarray(g), idx, h, w,
                                      kh, kw, 2, 2, ph, pw)
        return (dx,)

    return _record(out, (x,), back)


def rotate_image(x: Tensor, k: int) -> Tensor:
    """Exact counter-clockwise quarter-turn rotation of the last two axes."""
    if x.shape[-1] != x.shape[-2]:
        raise ValueError(f"rotate_image requires square spatial dims, got {x.shape}")
    k = k % 4
    out = Tensor(np.ascontiguousarray(np.rot90(x.data, k, axes=(-2, -1))),
                 dtype=x.dtype)
    return _record(out, (x,), lambda g: (
        np.ascontiguousarray(np.rot90(g, -k, axes=(-2, -1))),))


# ---------------------------------------------------------------------------
# batch normalization


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, axes: tuple,
               running_mean: np.ndarray, running_var: np.ndarray,
               eps: float = 1e-5, momentum: float = 0.9,
               train: bool = True, channel_axis: int = 1) -> Tensor:
    """Normalize over `axes` (which must exclude the channel axis).

    Train mode uses batch statistics and updates the running buffers in
    place; eval mode uses the running buffers. Variance is the biased
    (N-denominator) estimate in both modes.
    """
    if channel_axis in axes:
        raise ValueError("reduction axes must exclude the channel axis")
    count = int(np.prod([x.shape[ax] for ax in axes]))
    if count == 0:
        raise ValueError("zero-size reduction in batch_norm")
    stat_shape = [1] * x.ndim
    stat_shape[channel_axis] = x.shape[channel_axis]
    if train:
        mu = tmean(x, axis=axes, keepdims=True)
        var = tmean((x - mu) * (x - mu), axis=axes, keepdims=True)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu.data.reshape(-1)
        running_var *= momentum
        running_var += (1.0 - momentum) * var.data.reshape(-1)
        xhat = (x - mu) / sqrt(var + eps)
    else:
        mu_c = Tensor(running_mean.reshape(stat_shape), dtype=x.dtype)
        var_c = Tensor(running_var.reshape(stat_shape), dtype=x.dtype)
        xhat = (x - mu_c) / sqrt(var_c + eps)
    g = reshape(gamma, stat_shape)
    b = reshape(beta, stat_shape)
    return xhat * g + b
