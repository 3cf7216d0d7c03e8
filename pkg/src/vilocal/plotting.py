"""Figures for run reports.

Everything renders through the Agg backend and writes SVG with the creation
date stripped, so re-rendering identical inputs gives identical files.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluator import RobustnessTable  # noqa: E402

_RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "vilocal",
    "svg.fonttype": "none",
}
_METADATA = {"Date": None, "Creator": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fmt = path.suffix.lstrip(".") or "svg"
    meta = _METADATA if fmt == "svg" else {"Software": None} if fmt == "png" else None
    fig.savefig(path, format=fmt, metadata=meta)
    plt.close(fig)
    return path


def read_log(path) -> list[dict]:
    with Path(path).open(encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def plot_loss_curves(records: list[dict], path) -> Path:
    """One panel per training stage, loss against step."""
    steps = [r for r in records if r.get("kind") == "step" and not r.get("skipped")]
    stages = sorted({r["stage"] for r in steps}) or [1]
    with plt.rc_context(_RC):
        fig, axes = plt.subplots(1, len(stages), figsize=(3.4 * len(stages), 2.6), squeeze=False)
        for ax, stage in zip(axes[0], stages):
            rs = [r for r in steps if r["stage"] == stage]
            ax.plot([r["step"] for r in rs], [r["loss"] for r in rs], lw=1.0, color="C0" if stage == 1 else "C1")
            ax.set_xlabel("step")
            ax.set_ylabel("contrastive loss" if stage == 1 else "focal loss")
            ax.set_title(f"stage {stage}")
        fig.tight_layout()
        return _save(fig, path)


def plot_sweep(table: RobustnessTable, path) -> Path:
    """IoU and F1 against quality, one line per codec; the baseline is dashed."""
    with plt.rc_context(_RC):
        fig, axes = plt.subplots(1, 2, figsize=(6.8, 2.6), sharex=True)
        for ax, metric in zip(axes, ("iou", "f1")):
            for k, codec in enumerate(table.rows):
                ys = [table.cells.get((codec, q), {}).get(metric, math.nan) for q in table.cols]
                ax.plot(table.cols, ys, marker="o", ms=3, lw=1.0, color=f"C{k}", label=codec)
            if table.baseline is not None:
                ax.axhline(table.baseline[metric], ls="--", lw=0.8, color="0.4", label="uncompressed")
            ax.set_xlabel("quality (CRF)")
            ax.set_ylabel(metric.upper())
            ax.set_xticks(table.cols)
            ax.set_ylim(0, 1)
        axes[1].legend(frameon=False, loc="lower left")
        fig.tight_layout()
        return _save(fig, path)


def plot_recompression(table: RobustnessTable, path, metric: str = "iou") -> Path:
    """Heatmap with rows = second codec and columns = first codec."""
    grid = np.array([[table.cells.get((r, c), {}).get(metric, math.nan) for c in table.cols] for r in table.rows])
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(3.6, 3.0))
        im = ax.imshow(grid, vmin=0, vmax=1, cmap="viridis")
        ax.set_xticks(range(len(table.cols)), [str(c) for c in table.cols])
        ax.set_yticks(range(len(table.rows)), [str(r) for r in table.rows])
        ax.set_xlabel("first codec")
        ax.set_ylabel("second codec")
        for i in range(grid.shape[0]):
            for j in range(grid.shape[1]):
                text = "failed" if math.isnan(grid[i, j]) else f"{grid[i, j]:.2f}"
                ax.text(j, i, text, ha="center", va="center", fontsize=7,
                        color="white" if not grid[i, j] > 0.6 else "black")
        fig.colorbar(im, ax=ax, fraction=0.046, label=metric.upper())
        fig.tight_layout()
        return _save(fig, path)


def plot_video_scores(per_video: dict, path) -> Path:
    """Per-clip IoU and F1 bars, labelled by file stem."""
    names = sorted(per_video)
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(max(3.0, 0.35 * len(names) + 1.5), 2.6))
        x = np.arange(len(names))
        ax.bar(x - 0.2, [per_video[n]["iou"] for n in names], 0.4, label="IoU")
        ax.bar(x + 0.2, [per_video[n]["f1"] for n in names], 0.4, label="F1")
        ax.set_xticks(x, [Path(n).stem for n in names], rotation=60, ha="right", fontsize=6)
        ax.set_ylim(0, 1)
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)
