"""Static PNG figures: score histograms, AP bars and the complexity 2D histogram."""

from __future__ import annotations

import io
import os
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .data_io import Label, atomic_write_bytes  # noqa: E402

HIST2D_VMAX = 1000  # colour map clipped at this many samples per bin


def _save(fig, path) -> None:
    buf = io.BytesIO()
    # fixed metadata keeps reruns byte-identical
    fig.savefig(buf, format="png", dpi=100, metadata={"Software": None})
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())


def plot_histograms(report, path: str | os.PathLike) -> None:
    """One panel per dataset with real and generated score distributions."""
    hists = report.histograms
    names = sorted(hists)
    fig, axes = plt.subplots(1, max(len(names), 1), figsize=(3.2 * max(len(names), 1), 2.6), squeeze=False)
    for ax, ds in zip(axes[0], names):
        h = hists[ds]
        edges = np.asarray(h["edges"])
        for label, color in ((Label.REAL, "tab:blue"), (Label.GENERATED, "tab:red")):
            if label.value in h:
                ax.stairs(h[label.value], edges, label=label.value, color=color, fill=True, alpha=0.5)
        ax.set_title(ds, fontsize=9)
        ax.set_xlabel("reconstruction error")
    axes[0][0].legend(fontsize=7)
    fig.tight_layout()
    _save(fig, path)


def plot_ap_bars(report, path: str | os.PathLike) -> None:
    names = sorted(report.per_dataset)
    ap = [report.per_dataset[n].ap for n in names]
    tpr = [report.per_dataset[n].tpr_at_fpr for n in names]
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(1.2 * len(names) + 2, 3))
    ax.bar(x - 0.2, ap, 0.4, label="AP")
    ax.bar(x + 0.2, tpr, 0.4, label="TPR@FPR")
    ax.set_xticks(x, names, rotation=30, fontsize=8)
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, path)


def plot_report(report, plot_dir: str | os.PathLike) -> list[Path]:
    plot_dir = Path(plot_dir)
    out = [plot_dir / "histograms.png", plot_dir / "ap_bars.png"]
    plot_histograms(report, out[0])
    plot_ap_bars(report, out[1])
    return out


def plot_complexity(points, path: str | os.PathLike, bins: int = 50) -> None:
    """2D histogram of complexity vs error, one panel per label, colour clipped at HIST2D_VMAX."""
    from matplotlib.colors import Normalize

    cx = np.array([p.complexity for p in points], dtype=np.float64)
    err = np.array([p.error for p in points], dtype=np.float64)
    xr = (cx.min(), cx.max() if cx.max() > cx.min() else cx.min() + 1)
    yr = (err.min(), err.max() if err.max() > err.min() else err.min() + 1e-6)
    fig, axes = plt.subplots(1, 2, figsize=(7, 3), sharex=True, sharey=True)
    for ax, label in zip(axes, (Label.REAL, Label.GENERATED)):
        sel = np.array([p.label == label for p in points])
        ax.hist2d(cx[sel], err[sel], bins=bins, range=(xr, yr), norm=Normalize(0, HIST2D_VMAX), cmap="viridis")
        ax.set_title(label.value, fontsize=9)
        ax.set_xlabel("JPEG q50 bytes")
    axes[0].set_ylabel("reconstruction error")
    fig.tight_layout()
    _save(fig, path)
