"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation records its parents and a closure that maps
the output gradient onto parent gradients. ``backward`` replays those
closures in reverse topological order.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are not conformable."""


@contextlib.contextmanager
def no_grad():
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
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"

    # basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar ---------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    # autograd ---------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        backward(self, grad)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        dtype = DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.op = op
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.dtype != t.data.dtype:
        g = g.astype(t.data.dtype)
    if t.grad is None:
        t.grad = np.array(g, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        ref = b.dtype if isinstance(b, Tensor) else DEFAULT_DTYPE
        a = Tensor(np.asarray(a, dtype=ref))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


def _check_broadcast(a: Tensor, b: Tensor, name: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} are not broadcastable") from None


# --------------------------------------------------------------------------
# tape
# --------------------------------------------------------------------------

def build_tape(root: Tensor) -> list[Tensor]:
    """Topologically ordered list of the graph nodes feeding ``root``."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    if grad is None:
        if loss.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        return
    tape = build_tape(loss)
    # interior gradients are transient; leaves keep theirs
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.dtype)}
    for node in reversed(tape):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            _accum(node, g)
            continue
        node._backward(g)
        for p in node._parents:
            if p.requires_grad and p._backward is not None and p.grad is not None:
                grads[id(p)] = grads[id(p)] + p.grad if id(p) in grads else p.grad
                p.grad = None


# --------------------------------------------------------------------------
# elementwise arithmetic
# --------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), bw, "div")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: _accum(x, g * out), "exp")


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: _accum(x, g / x.data), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: _accum(x, g * 0.5 / out), "sqrt")


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, (x,), lambda g: _accum(x, 2.0 * g * x.data), "square")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp with straight zero gradient outside the range."""
    out = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(out, (x,), lambda g: _accum(x, g * inside), "clip")


# --------------------------------------------------------------------------
# activations
# --------------------------------------------------------------------------

_GELU_C = math.sqrt(2.0 / math.pi)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: _accum(x, g * mask), "relu")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)
    return _make(out, (x,), lambda g: _accum(x, g * out * (1.0 - out)), "sigmoid")


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    d = x.data
    inner = _GELU_C * (d + 0.044715 * d ** 3)
    t = np.tanh(inner)
    out = 0.5 * d * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * d * d)
        _accum(x, g * (0.5 * (1.0 + t) + 0.5 * d * (1.0 - t * t) * dinner))

    return _make(out, (x,), bw, "gelu")


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = {"gelu": gelu, "sigmoid": sigmoid, "relu": relu}[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    d = x.data
    e = np.exp(d - d.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        _accum(x, out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _make(out, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    d = x.data
    shifted = d - d.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bw(g):
        p = np.exp(out)
        _accum(x, g - p * g.sum(axis=axis, keepdims=True))

    return _make(out, (x,), bw, "log_softmax")


# --------------------------------------------------------------------------
# reductions and shape ops
# --------------------------------------------------------------------------

def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims, dtype=np.float64).astype(x.dtype)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accum(x, np.broadcast_to(g, x.shape))

    return _make(out, (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes]))
    out = x.data.mean(axis=axes, keepdims=keepdims, dtype=np.float64).astype(x.dtype)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accum(x, np.broadcast_to(g / n, x.shape))

    return _make(out, (x,), bw, "mean")


def tmax(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max along one axis; ties route the gradient to the first maximum."""
    idx = x.data.argmax(axis=axis)
    idx_k = np.expand_dims(idx, axis)
    out = np.take_along_axis(x.data, idx_k, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        full = np.zeros_like(x.data)
        np.put_along_axis(full, idx_k, g, axis=axis)
        _accum(x, full)

    return _make(out, (x,), bw, "max")


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return _make(out, (x,), lambda g: _accum(x, g.reshape(x.shape)), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = x.data.transpose(axes)
    return _make(out, (x,), lambda g: _accum(x, g.transpose(inv)), "transpose")


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    ref = xs[0].shape
    ax = axis % len(ref)
    for t in xs[1:]:
        if len(t.shape) != len(ref):
            raise ShapeError(f"concat: rank mismatch {ref} vs {t.shape}")
        for i, (p, q) in enumerate(zip(ref, t.shape)):
            if i != ax and p != q:
                raise ShapeError(f"concat: axis {i} differs ({p} vs {q}) outside concat axis {ax}")
    out = np.concatenate([t.data for t in xs], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in xs])

    def bw(g):
        for t, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(lo, hi)
                _accum(t, g[tuple(sl)])

    return _make(out, xs, bw, "concat")


def split(x: Tensor, sections: int, axis: int = 1) -> list[Tensor]:
    n = x.shape[axis]
    if n % sections:
        raise ShapeError(f"split: axis {axis} of extent {n} not divisible by {sections}")
    step = n // sections
    return [take(x, slice(i * step, (i + 1) * step), axis) for i in range(sections)]


def take(x: Tensor, index: slice, axis: int) -> Tensor:
    sl = [slice(None)] * x.ndim
    sl[axis] = index
    sl = tuple(sl)
    out = x.data[sl]

    def bw(g):
        full = np.zeros_like(x.data)
        full[sl] = g
        _accum(x, full)

    return _make(out, (x,), bw, "take")


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner axes differ ({a.shape[-1]} vs {b.shape[-2]})")
    out = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(out, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if weight.ndim != 2:
        raise ShapeError(f"linear: weight must be C_out x C_in, got {weight.shape}")
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(
            f"linear: last axis of input is {x.shape[-1]} but weight expects C_in={weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias shape {bias.shape} does not match C_out={weight.shape[0]}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        if x.requires_grad:
            _accum(x, g @ weight.data)
        if weight.requires_grad:
            _accum(weight, g.reshape(-1, g.shape[-1]).T @ x.data.reshape(-1, x.shape[-1]))
        if bias is not None and bias.requires_grad:
            _accum(bias, g.reshape(-1, g.shape[-1]).sum(axis=0))

    return _make(out, parents, bw, "linear")


# --------------------------------------------------------------------------
# convolution and pooling
# --------------------------------------------------------------------------

def _conv_out(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be N x C x H x W, got {x.shape}")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d: weight must be C_out x C_in/groups x k x k, got {weight.shape}")
    n, cin, h, w = x.shape
    cout, cg, kh, kw = weight.shape
    if cin % groups:
        raise ShapeError(f"conv2d: channel axis C_in={cin} is not divisible by groups={groups}")
    if cg != cin // groups:
        raise ShapeError(f"conv2d: channel axis of weight is {cg}, expected C_in/groups={cin // groups}")
    if cout % groups:
        raise ShapeError(f"conv2d: output channel axis C_out={cout} not divisible by groups={groups}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias axis has {bias.shape}, expected ({cout},)")
    ho, wo = _conv_out(h, kh, stride, padding), _conv_out(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: spatial axes {h}x{w} too small for kernel {kh}x{kw}")

    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    wd = weight.data

    pointwise = kh == 1 and kw == 1 and stride == 1 and groups == 1
    depthwise = groups == cin and cg == 1 and cout == cin
    if pointwise:
        out = np.einsum("oc,nchw->nohw", wd[:, :, 0, 0], xd, optimize=True)
        cols = None
    else:
        cols = sliding_window_view(xd, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        if depthwise:
            out = np.einsum("nchwij,cij->nchw", cols, wd[:, 0], optimize=True)
        elif groups == 1:
            out = np.tensordot(cols, wd, axes=((1, 4, 5), (1, 2, 3))).transpose(0, 3, 1, 2)
        else:
            cpo = cout // groups
            outs = []
            for gi in range(groups):
                c = cols[:, gi * cg:(gi + 1) * cg]
                wg = wd[gi * cpo:(gi + 1) * cpo]
                outs.append(np.tensordot(c, wg, axes=((1, 4, 5), (1, 2, 3))).transpose(0, 3, 1, 2))
            out = np.concatenate(outs, axis=1)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2, 3)))
        if pointwise:
            if weight.requires_grad:
                gw = np.einsum("nohw,nchw->oc", g, xd, optimize=True)
                _accum(weight, gw[:, :, None, None])
            if x.requires_grad:
                _accum(x, np.einsum("oc,nohw->nchw", wd[:, :, 0, 0], g, optimize=True))
            return
        if weight.requires_grad:
            if depthwise:
                gw = np.einsum("nchw,nchwij->cij", g, cols, optimize=True)[:, None]
            elif groups == 1:
                gw = np.tensordot(g, cols, axes=((0, 2, 3), (0, 2, 3)))
            else:
                cpo = cout // groups
                gw = np.concatenate([
                    np.tensordot(g[:, gi * cpo:(gi + 1) * cpo], cols[:, gi * cg:(gi + 1) * cg],
                                 axes=((0, 2, 3), (0, 2, 3)))
                    for gi in range(groups)], axis=0)
            _accum(weight, gw)
        if x.requires_grad:
            gx = np.zeros(xd.shape, dtype=xd.dtype)
            hs, ws = (ho - 1) * stride + 1, (wo - 1) * stride + 1
            if depthwise:
                for i in range(kh):
                    for j in range(kw):
                        gx[:, :, i:i + hs:stride, j:j + ws:stride] += g * wd[None, :, 0, i, j, None, None]
            elif groups == 1:
                # contributions of every kernel tap: N x C_in x H' x W' x k x k
                contrib = np.tensordot(g, wd, axes=((1,), (0,)))  # n,ho,wo,cin,kh,kw
                for i in range(kh):
                    for j in range(kw):
                        gx[:, :, i:i + hs:stride, j:j + ws:stride] += contrib[..., i, j].transpose(0, 3, 1, 2)
            else:
                cpo = cout // groups
                for gi in range(groups):
                    contrib = np.tensordot(g[:, gi * cpo:(gi + 1) * cpo], wd[gi * cpo:(gi + 1) * cpo],
                                           axes=((1,), (0,)))
                    for i in range(kh):
                        for j in range(kw):
                            gx[:, gi * cg:(gi + 1) * cg, i:i + hs:stride, j:j + ws:stride] += \
                                contrib[..., i, j].transpose(0, 3, 1, 2)
            if padding:
                gx = gx[:, :, padding:-padding, padding:-padding]
            _accum(x, gx)

    return _make(out, parents, bw, "conv2d")


def max_pool2d(x: Tensor, k: int, stride: int, padding: int = 0) -> Tensor:
    n, c, h, w = x.shape
    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                    constant_values=-np.inf)
    cols = sliding_window_view(xd, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = cols.shape[2], cols.shape[3]
    flat = cols.reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gx = np.zeros(xd.shape, dtype=xd.dtype)
        di, dj = np.divmod(arg, k)
        rows = np.arange(ho)[None, None, :, None] * stride + di
        cols_ = np.arange(wo)[None, None, None, :] * stride + dj
        nn = np.arange(n)[:, None, None, None]
        cc = np.arange(c)[None, :, None, None]
        np.add.at(gx, (nn, cc, rows, cols_), g)
        if padding:
            gx = gx[:, :, padding:-padding, padding:-padding]
        _accum(x, gx)

    return _make(np.ascontiguousarray(out), (x,), bw, "max_pool2d")


def area_downsample(x: Tensor, factor: int) -> Tensor:
    """Average over non-overlapping factor x factor blocks."""
    if factor == 1:
        return x
    n, c, h, w = x.shape
    if h % factor or w % factor:
        raise ShapeError(f"area_downsample: {h}x{w} not divisible by {factor}")
    out = x.data.reshape(n, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))

    def bw(g):
        gg = np.repeat(np.repeat(g, factor, axis=2), factor, axis=3) / (factor * factor)
        _accum(x, gg)

    return _make(out.astype(x.dtype), (x,), bw, "area_downsample")


def pool(x: Tensor, kind: str) -> Tensor:
    """Global average, or per-pixel average/max across channels."""
    if kind == "global_avg":
        return mean(x, axis=(2, 3), keepdims=True)
    if kind == "spatial_avg_over_channels":
        return mean(x, axis=1, keepdims=True)
    if kind == "spatial_max_over_channels":
        return tmax(x, axis=1, keepdims=True)
    raise ValueError(f"unknown pool kind {kind!r}")


def _bilinear_matrix(n: int, factor: int, dtype) -> np.ndarray:
    """Interpolation matrix (n*factor x n), half-pixel centres, edge clamped."""
    m = n * factor
    src = (np.arange(m) + 0.5) / factor - 0.5
    src = np.clip(src, 0, n - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    frac = src - lo
    mat = np.zeros((m, n), dtype=np.float64)
    mat[np.arange(m), lo] += 1.0 - frac
    mat[np.arange(m), hi] += frac
    return mat.astype(dtype)


def upsample(x: Tensor, factor: int, mode: str = "bilinear") -> Tensor:
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    if mode == "nearest":
        out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

        def bw(g):
            n, c, h, w = x.shape
            _accum(x, g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)))

        return _make(out, (x,), bw, "upsample_nearest")
    if mode != "bilinear":
        raise ValueError(f"unknown upsample mode {mode!r}")
    _, _, h, w = x.shape
    mh = _bilinear_matrix(h, factor, x.dtype)
    mw = _bilinear_matrix(w, factor, x.dtype)
    out = np.einsum("ih,nchw,jw->ncij", mh, x.data, mw, optimize=True)

    def bw(g):
        _accum(x, np.einsum("ih,ncij,jw->nchw", mh, g, mw, optimize=True))

    return _make(out, (x,), bw, "upsample_bilinear")


def layer_norm_channels(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise across the channel axis at every pixel, then scale/shift per channel."""
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    wv = weight.data[None, :, None, None]
    out = xhat * wv + bias.data[None, :, None, None]

    def bw(g):
        if weight.requires_grad:
            _accum(weight, (g * xhat).sum(axis=(0, 2, 3)))
        if bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gh = g * wv
            gx = inv * (gh - gh.mean(axis=1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=1, keepdims=True))
            _accum(x, gx)

    return _make(out.astype(xd.dtype), (x, weight, bias), bw, "layer_norm")


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    xd = x.data
    nrm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    den = np.maximum(nrm, eps)
    out = xd / den

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        gx = (g - out * dot * (nrm > eps)) / den
        _accum(x, gx)

    return _make(out, (x,), bw, "l2_normalize")


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------

def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps=1e-3,
               max_checks: int | None = None, seed: int = 0) -> float:
    """Worst relative error between tape gradients and central differences.

    Relative error is ``|a - b| / max(|a|, |b|, 1e-8)``. ``max_checks`` limits
    the number of probed coordinates per input (chosen with ``seed``); by
    default every coordinate is probed.

    ``eps`` may be a sequence of step sizes, in which case each coordinate
    keeps its best agreement. Large steps can straddle a ReLU/max kink and
    small steps lose digits to round-off; a wrong gradient disagrees at all.
    """
    steps = [float(e) for e in np.atleast_1d(eps)]
    for t in inputs:
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None
    out = f(*inputs)
    if out.size != 1:
        raise ShapeError(f"grad_check: f must return a scalar, got shape {out.shape}")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for t, ga in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_checks is not None and flat.size > max_checks:
                idx = rng.choice(flat.size, size=max_checks, replace=False)
            for i in idx:
                orig = flat[i]
                a = float(ga.reshape(-1)[i])
                err = math.inf
                for h in steps:
                    flat[i] = orig + h
                    fp = float(f(*inputs).data.sum(dtype=np.float64))
                    flat[i] = orig - h
                    fm = float(f(*inputs).data.sum(dtype=np.float64))
                    flat[i] = orig
                    num = (fp - fm) / (2 * h)
                    err = min(err, abs(a - num) / max(abs(a), abs(num), 1e-8))
                worst = max(worst, err)
    for t in inputs:
        t.grad = None
    return worst


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
