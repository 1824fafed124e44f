"""CSV emission and the matplotlib figures rendered next to each CSV.

CSV is the canonical machine-readable output; every figure is a convenience
rendering of the same rows, written as a PNG file through the Agg backend so
no display is ever needed.
"""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def write_csv(path, fieldnames, rows):
    """Write rows (sequences or dicts) with a header line."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fieldnames)
        for row in rows:
            if isinstance(row, dict):
                writer.writerow([row[k] for k in fieldnames])
            else:
                writer.writerow(list(row))


def plot_rd_curves(curves: dict, path):
    """Rate-distortion curves, one line per label."""
    fig, ax = plt.subplots(figsize=(5.5, 4.0))
    for label, points in curves.items():
        pts = sorted(points, key=lambda p: p.bpp)
        ax.plot([p.bpp for p in pts], [p.quality for p in pts], marker="o", label=label)
    ax.set_xlabel("bits per pixel")
    ax.set_ylabel("PSNR (dB)")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def plot_frame_curves(rows, path):
    """Per-frame quality and bit cost, two stacked panels."""
    frames = [r[0] for r in rows]
    psnrs = [r[1] for r in rows]
    bits = [r[2] for r in rows]
    fig, (ax0, ax1) = plt.subplots(2, 1, figsize=(6.5, 5.0), sharex=True)
    ax0.plot(frames, psnrs, lw=1.2)
    ax0.set_ylabel("PSNR (dB)")
    ax0.grid(True, alpha=0.3)
    ax1.plot(frames, bits, lw=1.2, color="tab:orange")
    ax1.set_ylabel("bits")
    ax1.set_xlabel("frame")
    ax1.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def plot_bd_table(rows, path):
    """Median BD-rate per configuration as a horizontal bar chart.

    ``rows`` are (label, median_bd_rate) pairs.
    """
    labels = [r[0] for r in rows]
    values = [r[1] for r in rows]
    fig, ax = plt.subplots(figsize=(5.5, 0.5 * len(rows) + 1.5))
    ax.barh(labels, values, color=["tab:green" if v <= 0 else "tab:red" for v in values])
    ax.axvline(0.0, color="k", lw=0.8)
    ax.set_xlabel("BD-rate vs m1 (%)")
    ax.invert_yaxis()
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def plot_stage_logs(logs, path):
    """Mean loss per epoch across the schedule."""
    fig, ax = plt.subplots(figsize=(6.0, 3.5))
    ax.plot(range(len(logs)), [l.mean_loss for l in logs], marker=".")
    ax.set_xlabel("epoch (cumulative)")
    ax.set_ylabel("mean loss")
    ax.set_yscale("log")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
