"""Matplotlib figures written to files (Agg backend, no display)."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import dsp  # noqa: E402

_FRAME_S = dsp.HOP_LENGTH / dsp.SAMPLE_RATE


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_spectrograms(panels: dict[str, np.ndarray], path, title: str = "") -> Path:
    """Side-by-side log-mel images sharing one colour scale."""
    names = list(panels)
    lo = min(float(np.min(panels[k])) for k in names)
    hi = max(float(np.max(panels[k])) for k in names)
    lo = max(lo, hi - 12.0)  # about 100 dB of power range is plenty
    fig, axes = plt.subplots(1, len(names), figsize=(4 * len(names), 3.4), sharey=True)
    axes = np.atleast_1d(axes)
    for ax, name in zip(axes, names):
        img = panels[name]
        extent = (0, img.shape[1] * _FRAME_S, 0, img.shape[0])
        im = ax.imshow(img, origin="lower", aspect="auto", vmin=lo, vmax=hi, extent=extent, cmap="magma")
        ax.set_title(name)
        ax.set_xlabel("time (s)")
    axes[0].set_ylabel("mel band")
    fig.colorbar(im, ax=list(axes), label="log mel energy")
    if title:
        fig.suptitle(title)
    return _save(fig, path)


def plot_metric_summary(summary: list[dict], path) -> Path:
    metrics = [("stoi", "median STOI"), ("sisdr_db", "median SI-SDR (dB)"), ("lsd_db", "median LSD (dB)")]
    snrs = sorted({s["snr_db"] for s in summary})
    conds = sorted({s["condition"] for s in summary}, reverse=True)
    fig, axes = plt.subplots(1, len(metrics), figsize=(12, 3.4))
    x = np.arange(len(snrs))
    width = 0.8 / max(len(conds), 1)
    for ax, (key, label) in zip(axes, metrics):
        for i, cond in enumerate(conds):
            vals = [next(s[key] for s in summary if s["snr_db"] == snr and s["condition"] == cond)
                    for snr in snrs]
            ax.bar(x + (i - (len(conds) - 1) / 2) * width, vals, width, label=cond)
        ax.set_xticks(x, [f"{s:g} dB" for s in snrs])
        ax.set_title(label)
    axes[0].legend()
    fig.tight_layout()
    return _save(fig, path)


def plot_training_curves(metrics_csv, path) -> Path:
    with open(metrics_csv, newline="") as fh:
        rows = list(csv.DictReader(fh))
    epoch = [int(r["epoch"]) for r in rows]

    def col(name):
        return [float(r[name]) for r in rows]

    fig, axes = plt.subplots(1, 3, figsize=(12, 3.4))
    axes[0].plot(epoch, col("d_loss"), "o-", label="d_loss")
    axes[0].plot(epoch, col("g_adv"), "o-", label="g_adv")
    axes[0].legend()
    axes[0].set_title("adversarial losses")
    axes[1].plot(epoch, col("g_l1"), "o-")
    axes[1].set_title("generator L1")
    axes[2].plot(epoch, col("val_sisdr"), "o-", color="tab:green")
    axes[2].set_title("validation SI-SDR (dB)")
    for ax in axes:
        ax.set_xlabel("epoch")
    fig.tight_layout()
    return _save(fig, path)
