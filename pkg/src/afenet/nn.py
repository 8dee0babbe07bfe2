"""Minimal module containers and the standard layers used by the network."""
from __future__ import annotations

import contextlib
import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

_meta = False


@contextlib.contextmanager
def meta_init():
    """Build modules with zero-stride placeholder weights (shape only, no storage)."""
    global _meta
    prev = _meta
    _meta = True
    try:
        yield
    finally:
        _meta = prev


def param(shape, rng: np.random.Generator | None, scale: float = 0.0,
          kind: str = "uniform", fill: float = 0.0) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if _meta:
        return Tensor(np.broadcast_to(np.float32(fill), shape), requires_grad=True)
    if scale == 0.0 or rng is None:
        data = np.full(shape, fill, dtype=np.float32)
    elif kind == "normal":
        data = rng.normal(0.0, scale, size=shape).astype(np.float32)
    else:
        data = rng.uniform(-scale, scale, size=shape).astype(np.float32)
    return Tensor(data, requires_grad=True)


def conv_flops(cin: int, cout: int, k: int, groups: int, ho: int, wo: int) -> int:
    return 2 * (cin // groups) * k * k * cout * ho * wo


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in self.__dict__.items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            if missing or extra:
                raise KeyError(f"state mismatch; missing={missing[:5]} unexpected={extra[:5]}")
        for k, p in own.items():
            if k in state:
                arr = np.asarray(state[k])
                if arr.shape != p.shape:
                    raise T.ShapeError(f"{k}: checkpoint shape {arr.shape} != model shape {p.shape}")
                p.data = arr.astype(p.dtype).copy()

    def astype(self, dtype) -> Module:
        for _, p in self.named_parameters():
            p.data = np.array(p.data, dtype=dtype)
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng=None, stride: int = 1,
                 groups: int = 1, bias: bool = True, init: str = "default", zero: bool = False):
        self.cin, self.cout, self.k, self.stride, self.groups = cin, cout, k, stride, groups
        fan_in = (cin // groups) * k * k
        if zero:
            self.weight = param((cout, cin // groups, k, k), None)
        elif init == "kaiming":
            self.weight = param((cout, cin // groups, k, k), rng, math.sqrt(2.0 / fan_in), "normal")
        else:
            self.weight = param((cout, cin // groups, k, k), rng, 1.0 / math.sqrt(fan_in))
        self.bias = param((cout,), rng, 0.0 if zero else 1.0 / math.sqrt(fan_in)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.k // 2, self.groups)

    def out_shape(self, shape):
        n, _, h, w = shape
        p = self.k // 2
        return (n, self.cout, (h + 2 * p - self.k) // self.stride + 1,
                (w + 2 * p - self.k) // self.stride + 1)

    def flops(self, shape) -> tuple[int, tuple]:
        out = self.out_shape(shape)
        return shape[0] * conv_flops(self.cin, self.cout, self.k, self.groups, out[2], out[3]), out


def depthwise(c: int, k: int, rng=None, bias: bool = True) -> Conv2d:
    return Conv2d(c, c, k, rng, groups=c, bias=bias)


class Linear(Module):
    def __init__(self, cin: int, cout: int, rng=None, bias: bool = True):
        self.cin, self.cout = cin, cout
        s = 1.0 / math.sqrt(cin)
        self.weight = param((cout, cin), rng, s)
        self.bias = param((cout,), rng, s) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)

    def flops(self, shape) -> tuple[int, tuple]:
        rows = int(np.prod(shape[:-1]))
        return 2 * rows * self.cin * self.cout, tuple(shape[:-1]) + (self.cout,)


class ChannelNorm(Module):
    """Layer normalisation over channels at each pixel, per-channel affine."""

    def __init__(self, c: int, eps: float = 1e-5, zero: bool = False):
        self.eps = eps
        self.weight = param((c,), None, fill=0.0 if zero else 1.0)
        self.bias = param((c,), None)

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm_channels(x, self.weight, self.bias, self.eps)
