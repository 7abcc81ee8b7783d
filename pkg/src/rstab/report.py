"""Report emission: aligned-column text, tab-delimited key/value files,
and matplotlib figures rendered alongside them."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def write_keyvalues(path, items: dict) -> None:
    """Tab-delimited key/value file, one pair per line."""
    with open(path, "w") as f:
        for k, v in items.items():
            f.write(f"{k}\t{v}\n")


def write_aligned(path, items: dict, title: str = "") -> None:
    width = max((len(str(k)) for k in items), default=0)
    with open(path, "w") as f:
        if title:
            f.write(title + "\n" + "-" * len(title) + "\n")
        for k, v in items.items():
            f.write(f"{str(k):<{width}}  {v}\n")


def write_table(path, rows: list, columns: list) -> None:
    """Tab-delimited table with a header row."""
    with open(path, "w") as f:
        f.write("\t".join(columns) + "\n")
        for row in rows:
            f.write("\t".join(str(row[c]) for c in columns) + "\n")


def trajectory_figure(path, input_poses, smoothed_poses) -> None:
    t_in = np.array([p.translation for p in input_poses])
    t_sm = np.array([p.translation for p in smoothed_poses])
    fig, axes = plt.subplots(3, 1, figsize=(7, 6), sharex=True)
    labels = ["x [m]", "y [m]", "z [m]"]
    for i, ax in enumerate(axes):
        ax.plot(t_in[:, i], label="input", color="tab:red", lw=1)
        ax.plot(t_sm[:, i], label="smoothed", color="tab:blue", lw=1.5)
        ax.set_ylabel(labels[i])
    axes[0].legend(loc="best")
    axes[0].set_title("camera center trajectory")
    axes[-1].set_xlabel("frame")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def weight_stats_figure(path, per_frame: list) -> None:
    frames = [r["frame"] for r in per_frame]
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 5), sharex=True)
    ax1.plot(frames, [r["weight_mean"] for r in per_frame], label="mean")
    ax1.plot(frames, [r["weight_min"] for r in per_frame], label="min")
    ax1.plot(frames, [r["weight_max"] for r in per_frame], label="max")
    ax1.set_ylabel("accumulated weight")
    ax1.legend(loc="best")
    ax2.plot(frames, [r["valid_fraction"] for r in per_frame], color="tab:green")
    ax2.set_ylabel("valid fraction")
    ax2.set_ylim(-0.02, 1.02)
    ax2.set_xlabel("frame")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def loss_curve_figure(path, curve: list) -> None:
    its = [c[0] for c in curve]
    losses = [c[1] for c in curve]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(its, losses)
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("batch MSE loss")
    ax.set_title("density head training")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def metrics_figure(path, metrics: dict) -> None:
    keys = [k for k, v in metrics.items() if isinstance(v, (int, float))]
    vals = [metrics[k] for k in keys]
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(keys)), 4))
    ax.bar(range(len(keys)), vals, color="tab:blue")
    ax.set_xticks(range(len(keys)))
    ax.set_xticklabels(keys, rotation=30, ha="right")
    for i, v in enumerate(vals):
        ax.text(i, v, f"{v:.3f}", ha="center", va="bottom", fontsize=8)
    ax.set_title("evaluation metrics")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def ensure_dir(path) -> str:
    os.makedirs(path, exist_ok=True)
    return os.fspath(path)
