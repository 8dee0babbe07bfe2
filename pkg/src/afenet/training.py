"""Losses, Adam, augmentation, the training loop and flip test-time augmentation."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from . import tensor as T
from .network import AfeNet, save_checkpoint
from .tensor import Tensor

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def _check_labels(labels: np.ndarray, k: int, ignore_index: int | None) -> np.ndarray:
    labels = np.asarray(labels)
    bad = (labels < 0) | (labels >= k)
    if ignore_index is not None:
        bad &= labels != ignore_index
    if bad.any():
        pos = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValueError(f"label {int(labels[pos])} at pixel {pos} is outside [0, {k})")
    return labels


def one_hot(labels: np.ndarray, k: int, dtype=np.float32) -> np.ndarray:
    """N x H x W integer labels -> N x K x H x W indicator (out-of-range rows stay zero)."""
    lab = np.asarray(labels)
    out = (lab[:, None] == np.arange(k)[None, :, None, None]).astype(dtype)
    return out


def ce_loss(logits: Tensor, labels, ignore_index: int | None = None) -> Tensor:
    k = logits.shape[1]
    labels = _check_labels(labels, k, ignore_index)
    valid = np.ones(labels.shape, dtype=bool) if ignore_index is None else labels != ignore_index
    count = int(valid.sum())
    if count == 0:
        raise ValueError("ce_loss: every pixel is ignored")
    target = one_hot(np.where(valid, labels, -1), k, logits.dtype)
    logp = T.log_softmax(logits, axis=1)
    return T.tsum(logp * Tensor(target)) * (-1.0 / count)


def dice_loss(logits: Tensor, labels, smooth: float = 1.0) -> Tensor:
    """Class-averaged soft Dice loss on softmax probabilities."""
    if smooth <= 0:
        raise ValueError(f"dice smoothing must be positive, got {smooth}")
    k = logits.shape[1]
    labels = _check_labels(labels, k, None)
    y = Tensor(one_hot(labels, k, logits.dtype))
    p = T.softmax(logits, axis=1)
    inter = T.tsum(p * y, axis=(0, 2, 3))
    denom = T.tsum(p, axis=(0, 2, 3)) + Tensor(y.data.sum(axis=(0, 2, 3)))
    dice = (inter * 2.0 + smooth) / (denom + smooth)
    return 1.0 - T.mean(dice)


def total_loss(logits: Tensor, labels, ce_weight: float = 1.0, dice_weight: float = 1.0,
               smooth: float = 1.0) -> tuple[Tensor, Tensor, Tensor]:
    """Returns (total, ce, dice)."""
    ce = ce_loss(logits, labels)
    dl = dice_loss(logits, labels, smooth)
    return ce * ce_weight + dl * dice_weight, ce, dl


# --------------------------------------------------------------------------
# optimiser
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict[str, Tensor]) -> AdamState:
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()})

    def to_table(self) -> dict[str, np.ndarray]:
        out = {f"optim.m.{k}": v for k, v in self.m.items()}
        out.update({f"optim.v.{k}": v for k, v in self.v.items()})
        out["optim.t"] = np.asarray([self.step], dtype=np.float32)
        return out

    @classmethod
    def from_table(cls, table: dict[str, np.ndarray]) -> AdamState:
        m = {k[len("optim.m."):]: v.copy() for k, v in table.items() if k.startswith("optim.m.")}
        v = {k[len("optim.v."):]: a.copy() for k, a in table.items() if k.startswith("optim.v.")}
        step = int(table["optim.t"][0]) if "optim.t" in table else 0
        return cls(m, v, step)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None], state: AdamState,
              lr: float, weight_decay: float = 0.0, decoupled: bool = True) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``.

    With ``decoupled`` the decay ``p -= lr * wd * p`` is applied before the
    moment update; otherwise ``wd * p`` is added to the gradient.
    """
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if weight_decay and not decoupled:
            g = g + weight_decay * p.data
        if weight_decay and decoupled:
            p.data = p.data - (lr * weight_decay) * p.data
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        delta = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - delta).astype(p.dtype)
    return state


# --------------------------------------------------------------------------
# augmentation
# --------------------------------------------------------------------------

def flip(image: np.ndarray, label: np.ndarray, axis: str) -> tuple[np.ndarray, np.ndarray]:
    """Flip a C x H x W image and H x W label horizontally ('h') or vertically ('v')."""
    if axis == "h":
        return image[..., ::-1].copy(), label[..., ::-1].copy()
    if axis == "v":
        return image[..., ::-1, :].copy(), label[..., ::-1, :].copy()
    raise ValueError(f"flip axis must be 'h' or 'v', got {axis!r}")


def _fit(arr: np.ndarray, h: int, w: int, oy: int, ox: int) -> np.ndarray:
    """Crop (when larger) or reflect-pad (when smaller) the last two axes to h x w."""
    ah, aw = arr.shape[-2:]
    if ah < h or aw < w:
        ph, pw = max(h - ah, 0), max(w - aw, 0)
        pad = [(0, 0)] * (arr.ndim - 2) + [(ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2)]
        arr = np.pad(arr, pad, mode="reflect" if min(ah, aw) > 1 else "edge")
        ah, aw = arr.shape[-2:]
    oy = min(oy, ah - h)
    ox = min(ox, aw - w)
    return arr[..., oy:oy + h, ox:ox + w]


def augment(image: np.ndarray, label: np.ndarray, rng: np.random.Generator,
            scale: bool = True, flips: bool = True,
            scale_range: tuple[float, float] = (0.75, 1.25)) -> tuple[np.ndarray, np.ndarray]:
    """Random rescale (then crop/pad back to size) and random h/v flips."""
    c, h, w = image.shape
    if scale:
        s = float(rng.uniform(*scale_range))
        nh, nw = max(2, int(round(h * s))), max(2, int(round(w * s)))
        zoom = (nh / h, nw / w)
        img = ndimage.zoom(image, (1.0,) + zoom, order=1, mode="nearest", grid_mode=True)
        lab = ndimage.zoom(label, zoom, order=0, mode="nearest", grid_mode=True)
        oy = int(rng.integers(0, max(img.shape[-2] - h, 0) + 1))
        ox = int(rng.integers(0, max(img.shape[-1] - w, 0) + 1))
        image = np.ascontiguousarray(_fit(img, h, w, oy, ox)).astype(image.dtype)
        label = np.ascontiguousarray(_fit(lab, h, w, oy, ox)).astype(label.dtype)
    if flips:
        if rng.random() < 0.5:
            image, label = flip(image, label, "h")
        if rng.random() < 0.5:
            image, label = flip(image, label, "v")
    return image, label


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------

@dataclass
class TrainConfig:
    learning_rate: float = 6e-4
    weight_decay: float = 0.01
    decoupled_weight_decay: bool = True
    batch_size: int = 4
    batches_per_epoch: int = 100
    epochs: int = 1
    steps: int | None = None
    seed: int = 0
    ce_weight: float = 1.0
    dice_weight: float = 1.0
    dice_smooth: float = 1.0
    augment_scale: bool = True
    augment_flip: bool = True
    lr_schedule: str = "constant"
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning rate and weight decay must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")
        if self.lr_schedule != "constant":
            raise ValueError(f"unsupported lr schedule {self.lr_schedule!r}")

    @property
    def total_steps(self) -> int:
        return self.steps if self.steps is not None else self.epochs * self.batches_per_epoch

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class HistoryRow:
    step: int
    loss_total: float
    loss_ce: float
    loss_dice: float
    lr: float


def batch_indices(n: int, batch_size: int, step: int, seed: int) -> np.ndarray:
    """Indices for ``step``: consecutive slices of per-epoch permutations."""
    start = step * batch_size
    out = []
    pos = start
    while len(out) < batch_size:
        epoch, offset = divmod(pos, n)
        perm = np.random.default_rng([seed, 1, epoch]).permutation(n)
        take = min(n - offset, batch_size - len(out))
        out.extend(perm[offset:offset + take].tolist())
        pos += take
    return np.asarray(out)


def make_batch(samples: Sequence, idx: np.ndarray, cfg: TrainConfig, step: int):
    images, labels = [], []
    for slot, i in enumerate(idx):
        img, lab = samples[int(i)].image, samples[int(i)].label
        if cfg.augment_scale or cfg.augment_flip:
            rng = np.random.default_rng([cfg.seed, 2, step, slot])
            img, lab = augment(img, lab, rng, cfg.augment_scale, cfg.augment_flip)
        images.append(img)
        labels.append(lab)
    return np.stack(images).astype(np.float32), np.stack(labels).astype(np.int64)


def train(model: AfeNet, dataset: Sequence, cfg: TrainConfig, *,
          state: AdamState | None = None, start_step: int = 0,
          checkpoint_path: str | Path | None = None,
          callback: Callable[[int, AfeNet], None] | None = None) -> list[HistoryRow]:
    """Train in place; returns the per-step loss history.

    Steps run from ``start_step`` to ``cfg.total_steps``; passing the saved
    optimiser state and step resumes an interrupted run exactly.
    """
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    params = dict(model.named_parameters())
    if state is None:
        state = AdamState.zeros_like(params)
    history: list[HistoryRow] = []
    mode = model.config.mask_mode
    for step in range(start_step, cfg.total_steps):
        idx = batch_indices(len(dataset), cfg.batch_size, step, cfg.seed)
        images, labels = make_batch(dataset, idx, cfg, step)
        model.zero_grad()
        logits = model(Tensor(images), mode=mode)
        loss, ce, dl = total_loss(logits, labels, cfg.ce_weight, cfg.dice_weight, cfg.dice_smooth)
        value = loss.item()
        if not math.isfinite(value):
            raise NumericalError(f"loss became {value} at step {step}")
        loss.backward()
        adam_step(params, {k: p.grad for k, p in params.items()}, state,
                  cfg.learning_rate, cfg.weight_decay, cfg.decoupled_weight_decay)
        history.append(HistoryRow(step, value, ce.item(), dl.item(), cfg.learning_rate))
        log.debug("step %d loss %.5f", step, value)
        done = step + 1
        if checkpoint_path and cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
            save_checkpoint(checkpoint_path, model, done, state.to_table())
        if callback is not None:
            callback(done, model)
    model.zero_grad()
    if checkpoint_path:
        save_checkpoint(checkpoint_path, model, max(cfg.total_steps, start_step), state.to_table())
    return history


def write_history(path, history: Sequence[HistoryRow], append: bool = False) -> None:
    path = Path(path)
    new = not append or not path.exists()
    with path.open("a" if append else "w", newline="") as fh:
        wr = csv.writer(fh)
        if new:
            wr.writerow(["step", "loss_total", "loss_ce", "loss_dice"])
        for r in history:
            wr.writerow([r.step, f"{r.loss_total:.8g}", f"{r.loss_ce:.8g}", f"{r.loss_dice:.8g}"])


def read_history(path) -> list[HistoryRow]:
    rows = []
    with Path(path).open() as fh:
        for rec in csv.DictReader(fh):
            rows.append(HistoryRow(int(rec["step"]), float(rec["loss_total"]),
                                   float(rec["loss_ce"]), float(rec["loss_dice"]), float("nan")))
    return rows


# --------------------------------------------------------------------------
# inference
# --------------------------------------------------------------------------

def infer(model: AfeNet, images: np.ndarray, mode: str | None = None) -> np.ndarray:
    mode = model.config.infer_mask_mode if mode is None else mode
    with T.no_grad():
        return model(Tensor(np.asarray(images, dtype=np.float32)), mode=mode).data


def tta_infer(model: AfeNet, images: np.ndarray, mode: str | None = None) -> np.ndarray:
    """Mean logits over identity, h-flip, v-flip and hv-flip, each flipped back."""
    images = np.asarray(images, dtype=np.float32)
    acc = None
    for axes in ((), (3,), (2,), (2, 3)):
        x = np.flip(images, axes) if axes else images
        y = infer(model, np.ascontiguousarray(x), mode)
        y = np.flip(y, axes) if axes else y
        acc = y.astype(np.float64) if acc is None else acc + y
    return (acc / 4.0).astype(np.float32)


def predict(model: AfeNet, images: np.ndarray, tta: bool = False, mode: str | None = None) -> np.ndarray:
    logits = tta_infer(model, images, mode) if tta else infer(model, images, mode)
    return logits.argmax(axis=1)
