"""Matplotlib rendering for the report paths.

Every CLI command that writes delimited output also drops a rendered figure
next to it: loss curves for training runs, heatmaps for analysis maps, and
grouped bars for ablation tables. Uses the Agg backend so runs are headless.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .analysis import AnalysisMap  # noqa: E402


def save_heatmap(amap: AnalysisMap, path) -> None:
    fig, ax = plt.subplots(figsize=(4, 4))
    if amap.kind == "similarity":
        im = ax.imshow(amap.grid, cmap="viridis", vmin=-1.0, vmax=1.0)
        title = f"similarity, query {amap.query_index}"
    else:
        im = ax.imshow(amap.grid, cmap="viridis")
        title = f"attention L{amap.layer} H{amap.head}, query {amap.query_index}"
    ax.set_title(title, fontsize=9)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_loss_curve(steps, losses, path, ema_window: int = 25) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, losses, lw=0.6, alpha=0.5, label="loss")
    if len(losses) >= ema_window:
        kernel = np.ones(ema_window) / ema_window
        smooth = np.convolve(losses, kernel, mode="valid")
        ax.plot(steps[ema_window - 1:], smooth, lw=1.5, label=f"mean({ema_window})")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_metric_trace(rows, path) -> None:
    """Trace rows are (epoch, split, metric, value)."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    series: dict[str, tuple[list, list]] = {}
    for epoch, split, metric, value in rows:
        key = f"{split}/{metric}"
        series.setdefault(key, ([], []))
        series[key][0].append(epoch)
        series[key][1].append(value)
    for key, (xs, ys) in sorted(series.items()):
        ax.plot(xs, ys, marker="o", ms=3, label=key)
    ax.set_xlabel("epoch")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_ablation_bars(labels, values, path, title: str = "") -> None:
    """Bar chart for ablation rows; non-numeric entries render as zero-height
    bars annotated with their status string."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    xs = np.arange(len(labels))
    heights = []
    notes = []
    for v in values:
        try:
            heights.append(float(v))
            notes.append(None)
        except (TypeError, ValueError):
            heights.append(0.0)
            notes.append(str(v))
    ax.bar(xs, heights, color="#4878cf")
    for x, note in zip(xs, notes):
        if note is not None:
            ax.text(x, 0.01, note, rotation=90, ha="center", va="bottom", fontsize=8)
    ax.set_xticks(xs)
    ax.set_xticklabels(labels, rotation=20, ha="right", fontsize=8)
    if title:
        ax.set_title(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
