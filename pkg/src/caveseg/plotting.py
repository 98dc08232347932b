"""Static report figures (PNG) rendered with the non-interactive Agg backend."""

from __future__ import annotations

import os
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib import cm as mpl_cm  # noqa: E402
from matplotlib.colors import Normalize  # noqa: E402

# Fixed metadata keeps repeated renders byte-identical.
_PNG_META = {"Software": None}


def _save(fig, path: os.PathLike) -> None:
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def plot_loss_curve(losses: Sequence[float], path: os.PathLike, title: str = "training loss") -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5), layout="constrained")
    steps = np.arange(len(losses))
    ax.plot(steps, losses, lw=1.2, color="tab:blue")
    if len(losses) and min(losses) > 0:
        ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("cross-entropy")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    _save(fig, path)


def plot_class_scores(iou: Sequence[float], acc: Sequence[float], names: Sequence[str],
                      path: os.PathLike, colors: Optional[np.ndarray] = None) -> None:
    """Grouped per-class IoU / accuracy bars in percent; undefined classes are left blank."""
    iou = 100 * np.asarray(iou, dtype=float)
    acc = 100 * np.asarray(acc, dtype=float)
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(max(6, 0.6 * len(names)), 4), layout="constrained")
    ax.bar(x - 0.2, np.nan_to_num(iou), 0.4, label="IoU", color="tab:blue")
    ax.bar(x + 0.2, np.nan_to_num(acc), 0.4, label="Acc", color="tab:orange")
    if colors is not None:
        ax.scatter(x, np.full(len(x), -4), c=np.asarray(colors) / 255, marker="s", s=40,
                   edgecolors="k", linewidths=0.5, clip_on=False)
    ax.set_xticks(x, names, rotation=45, ha="right")
    ax.set_ylim(-8, 105)
    ax.set_ylabel("%")
    ax.legend(frameon=False)
    ax.grid(axis="y", alpha=0.3)
    _save(fig, path)


def plot_caveline_3d(segments: np.ndarray, errors: Sequence[float], path: os.PathLike,
                     camera_centers: Optional[Sequence] = None) -> None:
    """3D segments coloured by neighbourhood-averaged reprojection error (px)."""
    segments = np.asarray(segments, dtype=float).reshape(-1, 2, 3)
    errors = np.asarray(errors, dtype=float)
    fig = plt.figure(figsize=(6, 5), layout="constrained")
    ax = fig.add_subplot(projection="3d")
    vmax = float(errors.max()) if errors.size and errors.max() > 0 else 1.0
    norm = Normalize(0.0, vmax)
    cmap = matplotlib.colormaps["viridis"]
    for seg, e in zip(segments, errors):
        ax.plot(seg[:, 0], seg[:, 1], seg[:, 2], color=cmap(norm(e)), lw=2)
    if camera_centers is not None:
        c = np.asarray(camera_centers, dtype=float).reshape(-1, 3)
        ax.scatter(c[:, 0], c[:, 1], c[:, 2], color="k", marker="^", label="cameras")
        ax.legend(frameon=False)
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    ax.set_zlabel("z")
    fig.colorbar(mpl_cm.ScalarMappable(norm=norm, cmap=cmap), ax=ax, shrink=0.7,
                 label="reprojection error (px)")
    _save(fig, path)
