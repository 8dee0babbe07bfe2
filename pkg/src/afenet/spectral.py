"""Centered 2D spectra, adaptive window masks and frequency band separation."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class Spectrum:
    real: Tensor
    imag: Tensor
    centered: bool = True

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.real.data, self.imag.data)

    def log_magnitude(self) -> np.ndarray:
        return np.log1p(self.magnitude())


@dataclass
class WindowRatios:
    r_h: float
    r_w: float

    def __post_init__(self):
        for name, v in (("r_h", self.r_h), ("r_w", self.r_w)):
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie strictly inside (0, 1), got {v}")


@dataclass
class MaskPair:
    low: Tensor
    high: Tensor
    mode: str = "hard"
    temperature: float | None = None


def fft2d(x: Tensor) -> Spectrum:
    """Unnormalised 2D DFT over the last two axes, DC moved to (H//2, W//2)."""
    h, w = x.shape[-2:]
    if h < 2 or w < 2:
        raise ValueError(f"fft2d needs H, W >= 2, got {h}x{w}")
    f = np.fft.fftshift(np.fft.fft2(x.data.astype(np.float64)), axes=(-2, -1))
    return Spectrum(Tensor(f.real), Tensor(f.imag), centered=True)


def ifft2d(s: Spectrum, return_residue: bool = False):
    """Inverse of :func:`fft2d`. Returns the real part (and optionally max |imag|)."""
    f = s.real.data.astype(np.float64) + 1j * s.imag.data
    if s.centered:
        f = np.fft.ifftshift(f, axes=(-2, -1))
    z = np.fft.ifft2(f)
    out = Tensor(z.real)
    if return_residue:
        return out, float(np.abs(z.imag).max()) if z.size else 0.0
    return out


def compress_dim(c: int) -> int:
    """Hidden width of the window-ratio MLP for ``c`` input channels."""
    if c < 2:
        raise ValueError(f"compress_dim needs C >= 2, got {c}")
    return max(2, math.floor(c / math.log2(c)))


def awm_thresholds(x_aligned: Tensor, fc1_w: Tensor, fc1_b: Tensor,
                   fc2_w: Tensor, fc2_b: Tensor) -> Tensor:
    """Per-sample window ratios, shape N x 2 with columns (r_h, r_w)."""
    n, c = x_aligned.shape[:2]
    d = compress_dim(c)
    if fc1_w.shape != (d, c):
        raise T.ShapeError(f"awm: fc1 weight is {fc1_w.shape}, expected ({d}, {c})")
    if fc2_w.shape != (2, d):
        raise T.ShapeError(f"awm: fc2 weight is {fc2_w.shape}, expected (2, {d})")
    g = T.pool(x_aligned, "global_avg").reshape(n, c)
    hidden = T.gelu(T.linear(g, fc1_w, fc1_b))
    return T.sigmoid(T.linear(hidden, fc2_w, fc2_b))


def window_half_sizes(h: int, w: int, r_h: float, r_w: float) -> tuple[int, int]:
    """Integer half extents of the low-pass window, clamped to [1, size // 2]."""
    hh = min(max(math.floor(h / 2 * r_h), 1), h // 2)
    ww = min(max(math.floor(w / 2 * r_w), 1), w // 2)
    return hh, ww


def _hard_mask(h: int, w: int, hh: int, ww: int) -> np.ndarray:
    m = np.zeros((h, w))
    ch, cw = h // 2, w // 2
    m[ch - hh:ch + hh, cw - ww:cw + ww] = 1.0
    return m


def _soft_axis(n: int, half: Tensor, temperature: float) -> Tensor:
    """Sigmoid-edged window along one axis; ``half`` has shape N x 1."""
    c = n // 2
    idx = Tensor(np.arange(n, dtype=half.dtype)[None, :])
    lower = T.sigmoid((idx - (c - 0.5 - half)) * (1.0 / temperature))
    upper = T.sigmoid(((c - 0.5 + half) - idx) * (1.0 / temperature))
    return lower * upper


def build_masks(h: int, w: int, r, mode: str = "hard", temperature: float = 1.0) -> MaskPair:
    """Low/high masks for an H x W centered spectrum.

    ``r`` is a :class:`WindowRatios`, a pair of floats, or a tensor of shape
    N x 2. Hard masks are H x W for scalar ratios and N x 1 x H x W for
    batched ones. Soft masks keep the graph back to ``r`` so the ratios
    receive gradients; ``temperature`` is the edge width in frequency bins.
    """
    if h < 2 or w < 2:
        raise ValueError(f"build_masks needs H, W >= 2, got {h}x{w}")
    if isinstance(r, WindowRatios):
        r = (r.r_h, r.r_w)
    batched = isinstance(r, Tensor)

    if mode == "hard":
        if batched:
            lows = [_hard_mask(h, w, *window_half_sizes(h, w, float(a), float(b)))
                    for a, b in r.data]
            low = np.stack(lows)[:, None].astype(r.dtype)
        else:
            low = _hard_mask(h, w, *window_half_sizes(h, w, float(r[0]), float(r[1])))
            low = low.astype(T.DEFAULT_DTYPE)
        return MaskPair(Tensor(low), Tensor(1.0 - low), "hard")

    if mode != "soft":
        raise ValueError(f"unknown mask mode {mode!r}")
    if not batched:
        r = Tensor(np.asarray([r], dtype=T.DEFAULT_DTYPE))
    n = r.shape[0]
    rh = T.take(r, slice(0, 1), axis=1)
    rw = T.take(r, slice(1, 2), axis=1)
    half_h = T.clip(rh * (h / 2), 1.0, float(h // 2))
    half_w = T.clip(rw * (w / 2), 1.0, float(w // 2))
    mh = _soft_axis(h, half_h, temperature).reshape(n, 1, h, 1)
    mw = _soft_axis(w, half_w, temperature).reshape(n, 1, 1, w)
    low = mh * mw
    high = 1.0 - low
    if not batched:
        low, high = low.reshape(h, w), high.reshape(h, w)
    return MaskPair(low, high, "soft", temperature)


def low_window_area(h: int, w: int, r: np.ndarray, mode: str = "soft") -> np.ndarray:
    """Fraction of the spectrum inside the low window for each row of ratios."""
    r = np.asarray(r, dtype=np.float64).reshape(-1, 2)
    if mode == "hard":
        return np.array([4 * hh * ww / (h * w)
                         for hh, ww in (window_half_sizes(h, w, a, b) for a, b in r)])
    hh = np.clip(r[:, 0] * h / 2, 1, h // 2)
    ww = np.clip(r[:, 1] * w / 2, 1, w // 2)
    return 4 * hh * ww / (h * w)


def spectral_filter(x: Tensor, mask: Tensor) -> Tensor:
    """Real part of IFFT(FFT(x) * mask), with ``mask`` laid out DC-centered.

    ``mask`` broadcasts against x (H x W, or N x 1 x H x W). Differentiable
    in both arguments.
    """
    xd = x.data
    mu = np.fft.ifftshift(mask.data, axes=(-2, -1))
    xf = np.fft.fft2(xd)
    y = np.fft.ifft2(xf * mu).real.astype(xd.dtype)

    def bw(g):
        if x.requires_grad:
            gx = np.fft.fft2(mu * np.fft.ifft2(g)).real
            T._accum(x, gx)
        if mask.requires_grad:
            gmu = (np.fft.ifft2(g) * xf).real
            gm = np.fft.fftshift(gmu, axes=(-2, -1))
            T._accum(mask, T._unbroadcast(gm, mask.shape))

    return T._make(y, (x, mask), bw, "spectral_filter")


def separate_bands(x_aligned: Tensor, ratios, mode: str = "hard",
                   temperature: float = 1.0) -> tuple[Tensor, Tensor, MaskPair]:
    """Split ``x_aligned`` into (high, low) bands with a centered window."""
    h, w = x_aligned.shape[-2:]
    masks = build_masks(h, w, ratios, mode, temperature)
    low = spectral_filter(x_aligned, masks.low)
    high = spectral_filter(x_aligned, masks.high)
    return high, low, masks


def separate_frequencies(x_raw: Tensor, conv_w: Tensor, conv_b: Tensor | None,
                         fc1_w: Tensor, fc1_b: Tensor, fc2_w: Tensor, fc2_b: Tensor,
                         mode: str = "hard", temperature: float = 1.0) -> tuple[Tensor, Tensor]:
    """Adaptive frequency separation of a raw image already at feature resolution.

    Returns ``(high, low)``, both N x C x H x W.
    """
    aligned = T.conv2d(x_raw, conv_w, conv_b, padding=conv_w.shape[-1] // 2)
    ratios = awm_thresholds(aligned, fc1_w, fc1_b, fc2_w, fc2_b)
    high, low, _ = separate_bands(aligned, ratios, mode, temperature)
    return high, low


def high_frequency_fraction(img: np.ndarray) -> float:
    """Share of spectral energy outside the centered half-size window."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=0)
    img = img - img.mean()
    h, w = img.shape
    f = np.abs(np.fft.fftshift(np.fft.fft2(img))) ** 2
    low = _hard_mask(h, w, max(h // 4, 1), max(w // 4, 1)).astype(bool)
    total = f.sum()
    return float(f[~low].sum() / total) if total > 0 else 0.0
