"""Static figures written next to CLI outputs (Agg backend, no display)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps PNG bytes reproducible
_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path


def loss_curve(history, path, window: int = 10) -> Path:
    steps = np.array([r.step for r in history])
    total = np.array([r.loss_total for r in history])
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, total, lw=0.8, alpha=0.5, label="total")
    ax.plot(steps, [r.loss_ce for r in history], lw=0.8, alpha=0.5, label="cross-entropy")
    ax.plot(steps, [r.loss_dice for r in history], lw=0.8, alpha=0.5, label="dice")
    if len(total) >= window:
        sm = np.convolve(total, np.ones(window) / window, mode="valid")
        ax.plot(steps[window - 1:], sm, color="k", lw=1.5, label=f"total ({window}-step mean)")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def freqsep_panel(image, log_spectrum, mask_low, band_low, band_high, path, ratios=None) -> Path:
    """image and bands are 3 x H x W; spectrum and mask are H x W."""
    def rgb(a):
        return np.clip(np.asarray(a).transpose(1, 2, 0), 0, 1)

    fig, axes = plt.subplots(1, 5, figsize=(13, 3))
    panels = [(rgb(image), "input", None), (log_spectrum, "log |F|", "magma"),
              (mask_low, "low mask", "gray"), (rgb(band_low), "low band", None),
              (rgb(np.abs(band_high)), "|high band|", None)]
    for ax, (arr, title, cmap) in zip(axes, panels):
        ax.imshow(arr, cmap=cmap, interpolation="nearest")
        ax.set_title(title, fontsize=9)
        ax.axis("off")
    if ratios is not None:
        fig.suptitle(f"r_h={ratios[0]:.3f}  r_w={ratios[1]:.3f}", fontsize=9)
    fig.tight_layout()
    return _save(fig, path)


def class_scores(rep, path) -> Path:
    x = np.arange(len(rep.class_names))
    f1 = np.where(rep.present, rep.f1, 0.0)
    iou = np.where(rep.present, rep.iou, 0.0)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(x - 0.2, f1, 0.4, label="F1")
    ax.bar(x + 0.2, iou, 0.4, label="IoU")
    ax.set_xticks(x, rep.class_names, rotation=20, fontsize=8)
    ax.set_ylim(0, 1)
    ax.set_title(f"mF1 {rep.mf1:.3f}   mIoU {rep.miou:.3f}   OA {rep.oa:.3f}", fontsize=9)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)
