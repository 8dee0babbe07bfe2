"""Frequency/spatial interaction: encoder-decoder fusion, dual depthwise
branches and channel-token cross-attention between the two domains."""
from __future__ import annotations

import math

import numpy as np

from . import spectral
from . import tensor as T
from .nn import Conv2d, Linear, Module, conv_flops, depthwise
from .tensor import Tensor


class CrossAttention(Module):
    """Queries from one feature map, keys/values from another; tokens are channels."""

    def __init__(self, c: int, heads: int, rng=None, zero_out: bool = False):
        if c % heads:
            raise ValueError(f"heads={heads} does not divide C={c}")
        self.c, self.heads = c, heads
        self.q_proj = Conv2d(c, c, 1, rng)
        self.q_dw = depthwise(c, 3, rng)
        self.kv_proj = Conv2d(c, 2 * c, 1, rng)
        self.kv_dw = depthwise(2 * c, 3, rng)
        self.out_proj = Conv2d(c, c, 1, rng, zero=zero_out)

    def forward(self, f_query: Tensor, f_context: Tensor) -> Tensor:
        return cross_attention(f_query, f_context, self)

    def flops(self, shape) -> int:
        n, c, h, w = shape
        hw = h * w
        total = n * (conv_flops(c, c, 1, 1, h, w) + conv_flops(c, c, 3, c, h, w)
                     + conv_flops(c, 2 * c, 1, 1, h, w) + conv_flops(2 * c, 2 * c, 3, 2 * c, h, w)
                     + conv_flops(c, c, 1, 1, h, w))
        ch = c // self.heads
        # scores and weighted sum, each heads * ch * ch * hw MACs
        total += n * 2 * 2 * self.heads * ch * ch * hw
        return total


def attention_weights(q: Tensor, k: Tensor, heads: int) -> Tensor:
    """Softmax over key channels for every query channel: N x heads x c x c."""
    n, c, h, w = q.shape
    ch, d = c // heads, h * w
    qm = q.reshape(n, heads, ch, d)
    km = k.reshape(n, heads, ch, d)
    scores = T.matmul(qm, km.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(d))
    return T.softmax(scores, axis=-1)


def cross_attention(f_fre: Tensor, f_spa: Tensor, w: CrossAttention, heads: int | None = None) -> Tensor:
    heads = w.heads if heads is None else heads
    if f_fre.shape != f_spa.shape:
        raise T.ShapeError(f"cross_attention: query {f_fre.shape} and context {f_spa.shape} differ")
    n, c, h, wd = f_fre.shape
    if c % heads:
        raise ValueError(f"cross_attention: heads={heads} does not divide C={c}")
    q = w.q_dw(w.q_proj(f_fre))
    k, v = T.split(w.kv_dw(w.kv_proj(f_spa)), 2, axis=1)
    attn = attention_weights(q, k, heads)
    vm = v.reshape(n, heads, c // heads, h * wd)
    out = T.matmul(attn, vm).reshape(n, c, h, wd)
    return w.out_proj(out)


def fuse_encoder_decoder(x_dec_next: Tensor | None, x_enc: Tensor, fuse: Conv2d | None) -> Tensor:
    """Upsample the coarser decoder map, concatenate with the encoder map, 1x1 conv.

    With no decoder input (deepest level) the encoder map passes through untouched.
    """
    if x_dec_next is None:
        return x_enc
    if fuse is None:
        raise ValueError("fuse_encoder_decoder: a decoder input needs fusion weights")
    he, we = x_enc.shape[-2:]
    hd, wdd = x_dec_next.shape[-2:]
    if (hd * 2, wdd * 2) != (he, we):
        raise T.ShapeError(
            f"fuse_encoder_decoder: decoder map {hd}x{wdd} is not half of encoder map {he}x{we}")
    up = T.upsample(x_dec_next, 2, "bilinear")
    return fuse(T.concat([up, x_enc], axis=1))


def spatial_branches(x_in: Tensor, dw5: Conv2d, dw7: Conv2d) -> tuple[Tensor, Tensor]:
    f_h = dw5(x_in)
    return f_h, dw7(f_h)


class Afsim(Module):
    def __init__(self, c: int, c_dec: int | None, heads: int, rng=None,
                 zero_out: bool = False, in_channels: int = 3):
        self.c = c
        self.fuse = Conv2d(c_dec + c, c, 1, rng) if c_dec else None
        self.align = Conv2d(in_channels, c, 3, rng)
        d = spectral.compress_dim(c)
        self.awm_fc1 = Linear(c, d, rng)
        self.awm_fc2 = Linear(d, 2, rng)
        self.dw5 = depthwise(c, 5, rng)
        self.dw7 = depthwise(c, 7, rng)
        self.attn_high = CrossAttention(c, heads, rng, zero_out)
        self.attn_low = CrossAttention(c, heads, rng, zero_out)
        self.last_ratios: np.ndarray | None = None

    def separate(self, x_raw: Tensor, mode: str, temperature: float):
        aligned = self.align(x_raw)
        ratios = spectral.awm_thresholds(aligned, self.awm_fc1.weight, self.awm_fc1.bias,
                                         self.awm_fc2.weight, self.awm_fc2.bias)
        self.last_ratios = ratios.data.astype(np.float64).copy()
        high, low, _ = spectral.separate_bands(aligned, ratios, mode, temperature)
        return high, low

    def forward(self, x_raw: Tensor, x_enc: Tensor, x_dec_next: Tensor | None,
                mode: str = "hard", temperature: float = 1.0):
        """Returns (F_h, F_l, X_in)."""
        x_in = fuse_encoder_decoder(x_dec_next, x_enc, self.fuse)
        f_h_fre, f_l_fre = self.separate(x_raw, mode, temperature)
        f_h_spa, f_l_spa = spatial_branches(x_in, self.dw5, self.dw7)
        f_h = cross_attention(f_h_fre, f_h_spa, self.attn_high)
        f_l = cross_attention(f_l_fre, f_l_spa, self.attn_low)
        return f_h, f_l, x_in

    def flops(self, shape, in_channels: int = 3) -> int:
        n, c, h, w = shape
        total = 0
        if self.fuse is not None:
            total += n * conv_flops(self.fuse.cin, c, 1, 1, h, w)
        total += n * conv_flops(in_channels, c, 3, 1, h, w)
        total += self.awm_fc1.flops((n, c))[0] + self.awm_fc2.flops((n, self.awm_fc1.cout))[0]
        # forward FFT once, inverse FFT per band
        total += 3 * n * c * fft_flops(h, w)
        total += n * (conv_flops(c, c, 5, c, h, w) + conv_flops(c, c, 7, c, h, w))
        total += self.attn_high.flops(shape) + self.attn_low.flops(shape)
        return total


def fft_flops(h: int, w: int) -> int:
    return int(round(5 * h * w * math.log2(h * w)))


def afsim_forward(x_raw: Tensor, x_enc: Tensor, x_dec_next: Tensor | None, weights: Afsim,
                  mode: str = "hard", temperature: float = 1.0) -> tuple[Tensor, Tensor]:
    f_h, f_l, _ = weights(x_raw, x_enc, x_dec_next, mode, temperature)
    return f_h, f_l
