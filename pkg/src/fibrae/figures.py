"""Matplotlib renderings written next to the delimited CLI outputs.

Everything here draws to files through the Agg backend; nothing opens a
window. Each function takes already-computed data so the library never needs
these imports on its numeric paths.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = [
    "save_loss_curves",
    "save_transport_map",
    "save_trace_plot",
    "save_metrics_plot",
    "save_interpolation_strip",
]


def save_loss_curves(history, path, dpi=150):
    """One panel per objective, loss value against global step."""
    by_objective = {}
    for _epoch, step, objective, value in history:
        by_objective.setdefault(objective, []).append((step, value))
    names = sorted(by_objective)
    if not names:
        return
    cols = 2
    rows = (len(names) + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(9, 2.6 * rows), squeeze=False)
    for ax, name in zip(axes.reshape(-1), names):
        pts = np.asarray(by_objective[name])
        ax.plot(pts[:, 0], pts[:, 1], lw=0.8)
        ax.set_title(name)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
    for ax in axes.reshape(-1)[len(names):]:
        ax.set_visible(False)
    fig.tight_layout()
    fig.savefig(path, dpi=dpi)
    plt.close(fig)


def save_transport_map(starts, ends, path, dpi=150):
    """Start fiber coordinates against their transported images."""
    starts = np.atleast_2d(np.asarray(starts, dtype=np.float64))
    ends = np.atleast_2d(np.asarray(ends, dtype=np.float64))
    fig, ax = plt.subplots(figsize=(5.5, 5.5))
    if starts.shape[1] >= 2:
        for s, e in zip(starts, ends):
            ax.plot([s[0], e[0]], [s[1], e[1]], color="0.75", lw=0.6, zorder=1)
        ax.scatter(starts[:, 0], starts[:, 1], s=18, color="tab:orange",
                   label="start fiber", zorder=2)
        ax.scatter(ends[:, 0], ends[:, 1], s=18, color="tab:blue",
                   label="transported", zorder=2)
        ax.set_xlabel("fiber coordinate 0")
        ax.set_ylabel("fiber coordinate 1")
    else:
        ax.scatter(starts[:, 0], ends[:, 0], s=18, color="tab:blue")
        lo = min(starts.min(), ends.min())
        hi = max(starts.max(), ends.max())
        ax.plot([lo, hi], [lo, hi], color="0.75", lw=0.8)
        ax.set_xlabel("start fiber coordinate")
        ax.set_ylabel("transported fiber coordinate")
    ax.legend(loc="best", fontsize=8) if starts.shape[1] >= 2 else None
    ax.set_title("fiber correspondence")
    fig.tight_layout()
    fig.savefig(path, dpi=dpi)
    plt.close(fig)


def save_trace_plot(times, trace, seg_energies, fiber_dim, path, dpi=150):
    """Fiber coordinates, base coordinates, and segment energy against time."""
    times = np.asarray(times)
    trace = np.atleast_2d(np.asarray(trace))
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.4))
    for i in range(fiber_dim):
        axes[0].plot(times, trace[:, i], label=f"f{i}")
    axes[0].set_title("fiber coordinates")
    for i in range(fiber_dim, trace.shape[1]):
        axes[1].plot(times, trace[:, i], label=f"b{i - fiber_dim}")
    axes[1].set_title("base coordinates")
    mids = 0.5 * (times[1:] + times[:-1])
    axes[2].plot(mids, seg_energies, lw=0.9)
    axes[2].set_title("segment energy")
    for ax in axes:
        ax.set_xlabel("t")
        if ax.lines and len(ax.lines) <= 6:
            ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=dpi)
    plt.close(fig)


def save_metrics_plot(lisi_scores, ward, path, dpi=150):
    """LISI score histogram beside the variance split bars."""
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.4))
    axes[0].hist(np.asarray(lisi_scores), bins=30, color="tab:blue")
    axes[0].set_title("per-point mixing score")
    axes[0].set_xlabel("score")
    names = ["total", "between", "within"]
    values = [ward["total"], ward["between"], ward["within"]]
    axes[1].bar(names, values, color=["0.4", "tab:orange", "tab:green"])
    axes[1].set_title("variance decomposition")
    fig.tight_layout()
    fig.savefig(path, dpi=dpi)
    plt.close(fig)


def save_interpolation_strip(frames, path, dpi=150):
    """Decoded frames along a path: image strip when frames are square images,
    a heatmap otherwise."""
    frames = np.atleast_2d(np.asarray(frames))
    count, dim = frames.shape
    side = int(round(np.sqrt(dim)))
    if side * side == dim and side >= 4:
        fig, axes = plt.subplots(1, count, figsize=(1.4 * count, 1.6), squeeze=False)
        for ax, frame in zip(axes[0], frames):
            ax.imshow(frame.reshape(side, side), cmap="gray", vmin=0.0, vmax=1.0)
            ax.set_xticks([])
            ax.set_yticks([])
    else:
        fig, ax = plt.subplots(figsize=(6, 3))
        ax.imshow(frames, aspect="auto", cmap="viridis")
        ax.set_xlabel("feature")
        ax.set_ylabel("frame")
    fig.tight_layout()
    fig.savefig(path, dpi=dpi)
    plt.close(fig)
