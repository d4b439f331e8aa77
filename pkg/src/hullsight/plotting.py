"""Figures written next to the JSON/CSV reports."""
from __future__ import annotations

from contextlib import contextmanager
from typing import Dict, Iterable, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import detection  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.direction": "in",
    "ytick.direction": "in",
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
}
# no timestamps or version strings, so repeated runs write identical files
_PNG_META = {"Software": None}


@contextmanager
def _figure(figsize=(5.0, 3.2), ncols=1):
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, ncols, figsize=figsize)
        try:
            yield fig, axes
        finally:
            plt.close(fig)


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, format="png", metadata=_PNG_META)


def plot_training_log(logs: Sequence, path) -> None:
    """Loss, loss weights and validation PSNR per epoch."""
    ep = [e.epoch for e in logs]
    with _figure((8.0, 3.0), ncols=2) as (fig, (ax1, ax2)):
        ax1.plot(ep, [e.loss for e in logs], color="k", lw=1.2, label="joint loss")
        ax1.set_xlabel("epoch")
        ax1.set_ylabel("loss")
        tw = ax1.twinx()
        tw.plot(ep, [e.lam for e in logs], ls="--", color="tab:blue", lw=1, label="lambda")
        tw.plot(ep, [e.beta for e in logs], ls=":", color="tab:red", lw=1, label="beta")
        tw.set_ylim(-0.05, 1.05)
        tw.set_ylabel("weight")
        tw.legend(loc="center right", frameon=False)
        rows = [e for e in logs if np.isfinite(e.val_denoise_psnr)]
        if rows:
            x = [e.epoch for e in rows]
            ax2.plot(x, [e.val_denoise_psnr for e in rows], marker="o", ms=2, label="denoised")
            ax2.plot(x, [e.val_sr_psnr for e in rows], marker="s", ms=2, label="super-resolved")
            ax2.plot(x, [e.val_noisy_psnr for e in rows], color="0.5", ls="--", label="noisy input")
            ax2.legend(frameon=False)
        ax2.set_xlabel("epoch")
        ax2.set_ylabel("held-out PSNR (dB)")
        _save(fig, path)


def plot_pr_curves(dets, gts, classes: Iterable[int], path, iou_threshold: float = 0.5) -> None:
    with _figure((4.0, 3.4)) as (fig, ax):
        for c in classes:
            p, r = detection.precision_recall(dets, gts, c, iou_threshold)
            if p.size == 0:
                continue
            env = np.maximum.accumulate(p[::-1])[::-1]
            ax.step(np.concatenate([[0.0], r]), np.concatenate([[env[0]], env]), where="post",
                    label=f"class {c}")
        ax.set_xlim(0, 1.02)
        ax.set_ylim(0, 1.02)
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
        ax.set_title(f"IoU {iou_threshold:.2f}")
        ax.legend(frameon=False, loc="lower left")
        _save(fig, path)


def plot_diagonal_distribution(diagonals: Sequence[float], result, path) -> None:
    """Box plot plus strip of diagonals; points above the upper bound in red."""
    d = np.asarray(diagonals, dtype=float)
    flagged = np.zeros(d.size, dtype=bool)
    flagged[list(result.flagged)] = True
    with _figure((5.0, 2.6)) as (fig, ax):
        ax.boxplot(d, orientation="horizontal", whis=result.k, widths=0.5, showfliers=False)
        jitter = np.linspace(-0.12, 0.12, d.size) if d.size > 1 else np.zeros(1)
        ax.scatter(d[~flagged], 1 + jitter[~flagged], s=8, color="tab:green", label="normal")
        ax.scatter(d[flagged], 1 + jitter[flagged], s=14, color="tab:red", label="anomaly")
        ax.axvline(result.upper_bound, color="tab:red", ls="--", lw=1,
                   label=f"Q3 + {result.k:g} IQR = {result.upper_bound:.2f}")
        ax.set_yticks([])
        ax.set_xlabel("bounding-box diagonal (px)")
        ax.legend(frameon=False, loc="upper right")
        _save(fig, path)


def draw_overlay(image, records: Sequence, path, flagged: Optional[Iterable[int]] = None,
                 labels: Optional[Dict[int, str]] = None) -> None:
    """Boxes drawn over an image; flagged records in red."""
    from matplotlib.patches import Rectangle

    flagged = set(flagged or ())
    px = image.pixels
    h, w = px.shape[:2]
    with plt.rc_context(STYLE):
        fig = plt.figure(figsize=(w / 100, h / 100), dpi=100)
        try:
            ax = fig.add_axes([0, 0, 1, 1])
            ax.imshow(px[:, :, 0] if px.shape[2] == 1 else px, cmap="gray", vmin=0, vmax=255,
                      interpolation="nearest")
            for i, r in enumerate(records):
                b = r.box
                color = "red" if i in flagged else "lime"
                ax.add_patch(Rectangle((b.x_min, b.y_min), b.width, b.height, fill=False,
                                       edgecolor=color, lw=1))
                if labels and i in labels:
                    ax.text(b.x_min, b.y_min, labels[i], color=color, fontsize=6, va="bottom")
            ax.set_axis_off()
            fig.savefig(path, format="png", metadata=_PNG_META, dpi=100)
        finally:
            plt.close(fig)
