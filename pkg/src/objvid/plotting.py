"""Report figures: loss curves, slot-mask overlays, state-change norms.

Everything renders off-screen to files.
"""
from __future__ import annotations

import os
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

LOSS_KEYS = ("L_obj", "L_temp", "L_cls", "total")


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_loss_curves(history: list[dict], path: str | os.PathLike) -> Path:
    """One line per loss term against the optimisation step."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    steps = [r["step"] for r in history if "step" in r]
    for key in LOSS_KEYS:
        vals = [r[key] for r in history if "step" in r and key in r]
        if vals and any(v != 0 for v in vals):
            ax.plot(steps[: len(vals)], vals, label=key, lw=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.grid(True, alpha=0.3)
    ax.legend(loc="upper right", fontsize=8)
    return _save(fig, path)


def plot_mask_overlay(frames: np.ndarray, assignments: np.ndarray, path: str | os.PathLike,
                      gt: np.ndarray | None = None, n_slots: int | None = None,
                      max_frames: int = 8) -> Path:
    """Frames on top, slot partitions below (and gt ids in a third row when given).

    ``frames`` is [T, C, H, W] in [0, 1]; ``assignments`` [T, H, W].
    """
    t = min(frames.shape[0], max_frames)
    rows = 3 if gt is not None else 2
    n_slots = n_slots or int(assignments.max()) + 1
    fig, axes = plt.subplots(rows, t, figsize=(1.4 * t, 1.5 * rows), squeeze=False)
    for i in range(t):
        img = np.moveaxis(frames[i], 0, -1)
        axes[0, i].imshow(img if img.shape[-1] == 3 else img[..., 0], cmap="gray", vmin=0, vmax=1)
        axes[1, i].imshow(img if img.shape[-1] == 3 else img[..., 0], cmap="gray", vmin=0, vmax=1)
        axes[1, i].imshow(assignments[i], cmap="tab10", vmin=0, vmax=max(n_slots - 1, 1), alpha=0.55,
                          interpolation="nearest")
        if gt is not None:
            axes[2, i].imshow(gt[i], cmap="tab10", vmin=0, vmax=9, interpolation="nearest")
        axes[0, i].set_title(f"t={i}", fontsize=7)
    for ax in axes.flat:
        ax.set_xticks([])
        ax.set_yticks([])
    axes[0, 0].set_ylabel("frame", fontsize=7)
    axes[1, 0].set_ylabel("slots", fontsize=7)
    if gt is not None:
        axes[2, 0].set_ylabel("gt", fontsize=7)
    return _save(fig, path)


def plot_norms(fg: list[float], bg: list[float], path: str | os.PathLike) -> Path:
    """Histogram of state-change norms for matched (foreground) and unmatched slots."""
    fig, ax = plt.subplots(figsize=(5, 3.2))
    bins = np.histogram_bin_edges(np.concatenate([np.asarray(fg, float), np.asarray(bg, float)]), bins=20) \
        if len(fg) + len(bg) else 10
    if len(fg):
        ax.hist(fg, bins=bins, alpha=0.6, label=f"foreground (mean {np.mean(fg):.3g})")
    if len(bg):
        ax.hist(bg, bins=bins, alpha=0.6, label=f"background (mean {np.mean(bg):.3g})")
    ax.set_xlabel("mean ||s|| per slot")
    ax.set_ylabel("slots")
    ax.legend(fontsize=8)
    return _save(fig, path)
