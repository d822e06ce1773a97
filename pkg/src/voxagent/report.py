"""Figures written next to the key=value reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def loss_curve(history: list[dict], path) -> Path:
    """Total, cross-entropy and image loss per update."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    if history:
        x = [h["update"] for h in history]
        for key, label in (("loss", "total"), ("ce", "cross-entropy"), ("img", "soft Dice")):
            ax.plot(x, [h[key] for h in history], label=label, lw=1)
        ax.set_yscale("log")
        ax.legend()
    ax.set_xlabel("update")
    ax.set_ylabel("loss")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def metric_bars(metrics: dict, path) -> Path:
    """Per-kind Dice and answer match as grouped bars."""
    path = Path(path)
    kinds = sorted({k.split(".")[0] for k in metrics if "." in k})
    fig, ax = plt.subplots(figsize=(6, 3.5))
    x = np.arange(len(kinds))
    for off, (key, label) in zip((-0.2, 0.2), (("dice", "Dice"), ("answer_match", "answer match"))):
        vals = [metrics.get(f"{k}.{key}", np.nan) for k in kinds]
        ax.bar(x + off, vals, width=0.4, label=label)
    ax.set_xticks(x, kinds, rotation=20, ha="right")
    ax.set_ylim(0, 1.05)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def mask_overlay(volume: np.ndarray, mask: np.ndarray, path, truth: np.ndarray | None = None) -> Path:
    """Axial slice through the mask centroid with the predicted (and true) outline."""
    path = Path(path)
    z = int(np.argwhere(mask).mean(axis=0)[2]) if mask.any() else volume.shape[2] // 2
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(volume[:, :, z].T, cmap="gray", origin="lower")
    if mask[:, :, z].any():
        ax.contour(mask[:, :, z].T.astype(float), levels=[0.5], colors="r", linewidths=1)
    if truth is not None and truth[:, :, z].any():
        ax.contour(truth[:, :, z].T.astype(float), levels=[0.5], colors="c", linewidths=1, linestyles="dashed")
    ax.set_axis_off()
    ax.set_title(f"slice {z}")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
