"""Selective fusion: per-pixel sigmoid gates choose between the high- and
low-frequency-enhanced features, and the result modulates the block input."""
from __future__ import annotations

from . import tensor as T
from .nn import Conv2d, Module, conv_flops
from .tensor import Tensor


class Sfm(Module):
    def __init__(self, c: int, rng=None, zero_out: bool = False):
        self.gate_conv = Conv2d(2, 2, 7, rng)
        self.out_proj = Conv2d(c, c, 1, rng, zero=zero_out)

    def forward(self, f_h: Tensor, f_l: Tensor, x_in: Tensor) -> Tensor:
        return sfm_fuse(f_h, f_l, x_in, self)

    def flops(self, shape) -> int:
        n, c, h, w = shape
        return n * (conv_flops(2, 2, 7, 1, h, w) + conv_flops(c, c, 1, 1, h, w))


def channel_pool(f_c: Tensor) -> tuple[Tensor, Tensor]:
    """Mean and max across channels, each N x 1 x H x W."""
    return (T.pool(f_c, "spatial_avg_over_channels"),
            T.pool(f_c, "spatial_max_over_channels"))


def spatial_gates(u_avg: Tensor, u_max: Tensor, gate_conv: Conv2d) -> tuple[Tensor, Tensor]:
    g = T.sigmoid(gate_conv(T.concat([u_avg, u_max], axis=1)))
    return T.take(g, slice(0, 1), axis=1), T.take(g, slice(1, 2), axis=1)


def sfm_fuse(f_h: Tensor, f_l: Tensor, x_in: Tensor, w: Sfm) -> Tensor:
    if not (f_h.shape == f_l.shape == x_in.shape):
        raise T.ShapeError(
            f"sfm_fuse: inputs must share a shape, got {f_h.shape}, {f_l.shape}, {x_in.shape}")
    u_avg, u_max = channel_pool(T.concat([f_h, f_l], axis=1))
    g1, g2 = spatial_gates(u_avg, u_max, w.gate_conv)
    fused = w.out_proj(g1 * f_h + g2 * f_l)
    return fused * x_in
