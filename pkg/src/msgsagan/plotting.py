"""Figures written next to run records and ablation CSVs.

Uses the object-oriented matplotlib API with an Agg canvas so that nothing
touches pyplot's global figure state.
"""
from __future__ import annotations

import math
from pathlib import Path

import matplotlib
import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.2,
    "savefig.dpi": 120,
    "svg.hashsalt": "msgsagan",
}
COLORS = ("#0072B2", "#D55E00", "#009E73", "#CC79A7")


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    FigureCanvasAgg(fig)
    fig.savefig(path, metadata={"Software": None})
    return path


def sample_grid(images: np.ndarray, path, ncols: int = 8, title: str | None = None) -> Path:
    """Montage of up to ``ncols**2`` uint8 grayscale images ``[N, H, W]``."""
    images = np.asarray(images)[: ncols * ncols]
    n = max(len(images), 1)
    nrows = math.ceil(n / ncols)
    with matplotlib.rc_context(STYLE):
        fig = Figure(figsize=(ncols * 0.8, nrows * 0.8 + (0.3 if title else 0)))
        axes = fig.subplots(nrows, ncols, squeeze=False)
        for i, ax in enumerate(axes.flat):
            ax.set_axis_off()
            if i < len(images):
                ax.imshow(images[i], cmap="gray", vmin=0, vmax=255, interpolation="nearest")
        if title:
            fig.suptitle(title)
        fig.subplots_adjust(left=0.01, right=0.99, bottom=0.01, top=0.92 if title else 0.99,
                            wspace=0.05, hspace=0.05)
        return _save(fig, path)


def loss_curves(steps, loss_d, loss_g, path, smooth: int = 25) -> Path:
    steps = np.asarray(steps)
    with matplotlib.rc_context(STYLE):
        fig = Figure(figsize=(6, 3))
        ax = fig.add_subplot()
        for values, label, color in ((loss_d, "discriminator", COLORS[0]), (loss_g, "generator", COLORS[1])):
            values = np.asarray(values, dtype=float)
            ax.plot(steps, values, color=color, alpha=0.25)
            if len(values) >= smooth > 1:
                kernel = np.ones(smooth) / smooth
                ax.plot(steps[smooth - 1:], np.convolve(values, kernel, mode="valid"), color=color, label=label)
            else:
                ax.lines[-1].set_label(label)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def metric_curves(metric_rows: list[dict], path) -> Path:
    steps = [r["step"] for r in metric_rows]
    with matplotlib.rc_context(STYLE):
        fig = Figure(figsize=(7, 3))
        ax_fid, ax_ssim = fig.subplots(1, 2)
        ax_fid.plot(steps, [r["fid"] for r in metric_rows], marker="o", ms=3, color=COLORS[0])
        ax_fid.set_xlabel("step")
        ax_fid.set_ylabel("FID")
        ax_ssim.plot(steps, [r["ms_ssim_real"] for r in metric_rows], color=COLORS[2], label="real")
        ax_ssim.plot(steps, [r["ms_ssim_gen"] for r in metric_rows], marker="o", ms=3, color=COLORS[1],
                     label="generated")
        ax_ssim.set_xlabel("step")
        ax_ssim.set_ylabel("MS-SSIM")
        ax_ssim.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def ablation_chart(rows: list[dict], path) -> Path:
    """FID and MS-SSIM (real vs generated) per variant; failed runs are left blank."""
    names = [r["GAN"] for r in rows]
    x = np.arange(len(rows))

    def col(key):
        return np.array([r[key] if r[key] is not None else np.nan for r in rows], dtype=float)

    with matplotlib.rc_context(STYLE):
        fig = Figure(figsize=(max(5, 0.45 * len(rows) + 2), 5))
        ax_fid, ax_ssim = fig.subplots(2, 1, sharex=True)
        ax_fid.bar(x, col("FID"), color=COLORS[0])
        ax_fid.set_ylabel("FID")
        ax_ssim.bar(x - 0.2, col("MR"), width=0.4, color=COLORS[2], label="real")
        ax_ssim.bar(x + 0.2, col("MG"), width=0.4, color=COLORS[1], label="generated")
        ax_ssim.set_ylabel("MS-SSIM")
        ax_ssim.legend(frameon=False)
        ax_ssim.set_xticks(x)
        ax_ssim.set_xticklabels(names, rotation=60, ha="right")
        fig.tight_layout()
        return _save(fig, path)
