"""Matplotlib figures written next to the CSV/JSON reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

PALETTE = {"train": "#1f77b4", "val": "#2ca02c", "test": "#d62728",
           "cascaded": "#1f77b4", "parallel": "#2ca02c", "cm": "#ff7f0e"}

_RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 120,
}


def new(nrows: int = 1, ncols: int = 1, width: float = 5.0, height: float = 3.2):
    with plt.rc_context(_RC):
        return plt.subplots(nrows=nrows, ncols=ncols, figsize=(width, height))


def save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(_RC):
        fig.tight_layout()
        fig.savefig(path)
    plt.close(fig)
    return path


def plot_distribution(report, path, title: str = "") -> Path:
    fig, ax = new()
    centers = 0.5 * (report.edges[:-1] + report.edges[1:])
    width = report.edges[1] - report.edges[0]
    for name in ("train", "test"):
        if name in report.counts:
            counts = report.counts[name]
            dens = counts / max(counts.sum(), 1) / width
            ax.bar(centers, dens, width=width, alpha=0.5, color=PALETTE[name], label=name)
    ax.set_xlabel("z-scored value")
    ax.set_ylabel("density")
    ax.set_title(title or "train vs test distribution")
    ax.legend(frameon=False)
    return save(fig, path)


def plot_history(history, path) -> Path:
    fig, ax = new()
    epochs = [r.epoch for r in history]
    ax.plot(epochs, [r.train_loss for r in history], color=PALETTE["train"], label="train loss")
    ax.plot(epochs, [r.val_mae for r in history], color=PALETTE["val"], label="val MAE")
    ax.set_xlabel("epoch")
    ax.set_ylabel("MAE")
    ax.legend(frameon=False)
    return save(fig, path)


def plot_horizons(reports: dict, path) -> Path:
    fig, axes = new(1, 3, width=9.0, height=2.8)
    for ax, metric in zip(axes, ("mae", "rmse", "mape")):
        for split, rep in reports.items():
            keys = [k for k in rep.rows if k.startswith("horizon_")]
            xs = [int(k.split("_")[1]) for k in keys]
            ax.plot(xs, [getattr(rep.rows[k], metric) for k in keys], marker="o",
                    color=PALETTE.get(split), label=split)
        ax.set_xlabel("horizon (steps)")
        ax.set_title(metric.upper())
    axes[0].legend(frameon=False)
    return save(fig, path)


def plot_ablation(rows: list[dict], path) -> Path:
    """Test MAE per embedding variant, cascaded vs parallel side by side."""
    labels = []
    for r in rows:
        if r["structure"] == "cascaded" and r["channel"] == "ci" and r["removed"] not in labels:
            labels.append(r["removed"])
    fig, ax = new(width=6.0)
    x = np.arange(len(labels))
    for off, structure in ((-0.2, "cascaded"), (0.2, "parallel")):
        vals = []
        for lab in labels:
            match = [r for r in rows if r["removed"] == lab and r["structure"] == structure and r["channel"] == "ci"]
            vals.append(match[0]["test_mae"] if match else np.nan)
        ax.bar(x + off, vals, width=0.4, color=PALETTE[structure], label=structure)
    ax.set_xticks(x, [("full" if lab == "none" else f"w/o {lab}") for lab in labels])
    ax.set_ylabel("test MAE")
    finite = [r["test_mae"] for r in rows if np.isfinite(r["test_mae"])]
    if finite:
        lo, hi = min(finite), max(finite)
        ax.set_ylim(lo - 0.1 * (hi - lo + 1e-9), hi + 0.1 * (hi - lo + 1e-9))
    ax.legend(frameon=False)
    return save(fig, path)


def plot_timings(normalized: dict[str, float], path) -> Path:
    fig, ax = new(width=4.5)
    names = list(normalized)
    ax.barh(names, [normalized[n] for n in names], color=PALETTE["cascaded"])
    ax.set_xlabel("normalized seconds / epoch")
    ax.set_xlim(0, 1.05)
    return save(fig, path)
