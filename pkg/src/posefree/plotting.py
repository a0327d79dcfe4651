"""Report figures: epipolar overlays and evaluation summaries.

Everything renders through the Agg backend straight to files; no window
is ever opened.
"""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import OverlapSplit  # noqa: E402

RC = {
    "axes": dict(labelsize=8, titlesize=9, linewidth=0.6),
    "figure": dict(dpi=100, facecolor="white"),
    "font": dict(size=8),
    "legend": dict(fontsize=7, frameon=False),
    "lines": dict(linewidth=0.8),
    "xtick": dict(labelsize=7),
    "ytick": dict(labelsize=7),
    "savefig": dict(dpi=120, bbox="tight"),
}

SPLIT_COLORS = {"Small": "#c44e52", "Medium": "#dd8452", "Large": "#4c72b0"}

# fixed metadata keeps the PNG bytes stable between runs
_PNG_META = {"Software": None}


def _rc():
    flat = {f"{group}.{k}": v for group, vals in RC.items() for k, v in vals.items()}
    return plt.rc_context(flat)


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)
    return path


def _clip_line(line, width: int, height: int):
    """Endpoints of ``a x + b y + c = 0`` inside the image box, or None."""
    a, b, c = line
    pts = []
    if abs(b) > 1e-12:
        for x in (0.0, width - 1.0):
            y = -(a * x + c) / b
            if 0 <= y <= height - 1:
                pts.append((x, y))
    if abs(a) > 1e-12:
        for y in (0.0, height - 1.0):
            x = -(b * y + c) / a
            if 0 <= x <= width - 1:
                pts.append((x, y))
    if len(pts) < 2:
        return None
    return pts[0], pts[-1]


def epipolar_overlay(path, i1, i2, points, lines, matches=None, title: str = "") -> Path:
    """Points on I1 beside their epipolar lines on I2.

    Args:
        points: ``(n, 2)`` pixels in I1.
        lines: ``(n, 3)`` normalized lines in I2.
        matches: optional ``(n, 2)`` correspondences in I2, drawn as crosses.
    """
    h, w = np.shape(i2)[:2]
    colors = plt.cm.hsv(np.linspace(0, 1, len(points), endpoint=False))
    with _rc():
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 4))
        ax1.imshow(np.clip(i1, 0, 1), interpolation="nearest")
        ax2.imshow(np.clip(i2, 0, 1), interpolation="nearest")
        for p, line, col in zip(points, lines, colors):
            ax1.plot(p[0], p[1], "o", ms=3, color=col)
            seg = _clip_line(line, w, h)
            if seg is not None:
                ax2.plot([seg[0][0], seg[1][0]], [seg[0][1], seg[1][1]], color=col)
        if matches is not None:
            for m, col in zip(matches, colors):
                if np.all(np.isfinite(m)):
                    ax2.plot(m[0], m[1], "x", ms=4, color=col)
        for ax, name in ((ax1, "I1"), (ax2, "I2")):
            ax.set_title(name)
            ax.set_xlim(-0.5, w - 0.5)
            ax.set_ylim(h - 0.5, -0.5)
            ax.set_xticks([])
            ax.set_yticks([])
        if title:
            fig.suptitle(title)
        return _save(fig, path)


def split_histogram(path, records) -> Path:
    """Overlap scores of all pairs, colored by split, with the thresholds marked."""
    with _rc():
        fig, ax = plt.subplots(figsize=(4.5, 3))
        bins = np.linspace(0, 1, 21)
        for split in OverlapSplit:
            vals = [r.overlap for r in records if r.split == split.value]
            if vals:
                ax.hist(vals, bins=bins, color=SPLIT_COLORS[split.value], label=split.value)
        for x in (0.5, 0.75):
            ax.axvline(x, color="0.4", ls="--", lw=0.6)
        ax.set_xlabel("overlap")
        ax.set_ylabel("pairs")
        ax.legend()
        return _save(fig, path)


def metric_panels(path, summary: dict, metrics=("rot_err_deg", "trans_ang_deg", "psnr")) -> Path:
    """Average with a one-std bar per split, one panel per metric."""
    splits = [s for s in ("Small", "Medium", "Large", "overall") if s in summary]
    with _rc():
        fig, axes = plt.subplots(1, len(metrics), figsize=(3 * len(metrics), 2.8), squeeze=False)
        for ax, m in zip(axes[0], metrics):
            avg = [summary[s][m].avg for s in splits]
            std = [summary[s][m].std for s in splits]
            avg = [0.0 if math.isnan(v) else v for v in avg]
            std = [0.0 if math.isnan(v) else v for v in std]
            ax.bar(range(len(splits)), avg, yerr=std, capsize=2,
                   color=[SPLIT_COLORS.get(s, "0.6") for s in splits])
            ax.set_xticks(range(len(splits)))
            ax.set_xticklabels(splits)
            ax.set_title(m)
        fig.tight_layout()
        return _save(fig, path)
