"""Figure rendering for inspection, training and evaluation outputs.

Every function writes one PNG next to the run's delimited output and
returns the path. Matplotlib runs on the Agg backend so rendering works
headless.
"""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .corpus import InspectReport
from .evaluation import CompareTable, EvalReport


def save_duration_histogram(report: InspectReport, path) -> Path:
    """Pooled 1 s duration histogram over [0, 10) s."""
    path = Path(path)
    counts = report.histogram_counts
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(np.arange(10) + 0.5, counts, width=0.9, color="tab:blue")
    ax.set_xticks(range(11))
    ax.set_xlabel("duration [s]")
    ax.set_ylabel("samples")
    ax.set_title(f"durations of {report.total_samples()} samples, {report.total_hours():.2f} h")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_training_curves(history: list, path) -> Path:
    """Loss and development UAR against epochs (or rounds)."""
    path = Path(path)
    axis_key = "epoch" if history and "epoch" in history[0] else "round"
    xs = [rec[axis_key] for rec in history]
    losses = [rec["train_loss"] for rec in history]
    evals = [(rec[axis_key], rec["devel_uar"]) for rec in history if rec.get("devel_uar") is not None]

    fig, (top, bottom) = plt.subplots(2, 1, figsize=(6, 5), sharex=True)
    top.plot(xs, losses, color="tab:red")
    top.set_ylabel("train loss")
    stages = [rec.get("stage", 0) for rec in history]
    for i in range(1, len(stages)):  # mark LR stage boundaries
        if stages[i] != stages[i - 1]:
            for ax in (top, bottom):
                ax.axvline(xs[i], color="gray", linestyle=":", linewidth=1)
    if evals:
        bottom.plot([e[0] for e in evals], [e[1] for e in evals], color="tab:blue", marker=".")
    bottom.set_ylabel("devel UAR")
    bottom.set_xlabel(axis_key)
    bottom.set_ylim(0.0, 1.05)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_confusion_heatmap(report: EvalReport, path) -> Path:
    """Row-normalized confusion matrix with count annotations."""
    path = Path(path)
    conf = np.asarray(report.confusion, dtype=np.float64)
    row_sums = conf.sum(axis=1, keepdims=True)
    shares = np.divide(conf, row_sums, out=np.zeros_like(conf), where=row_sums > 0)

    k = len(report.classes)
    fig, ax = plt.subplots(figsize=(1.0 + 0.7 * k, 1.0 + 0.7 * k))
    image = ax.imshow(shares, cmap="Blues", vmin=0.0, vmax=1.0)
    ax.set_xticks(range(k), report.classes, rotation=45, ha="right")
    ax.set_yticks(range(k), report.classes)
    ax.set_xlabel("prediction")
    ax.set_ylabel("reference")
    ax.set_title(f"{report.corpus_id} {report.partition}: UAR {report.uar:.3f}")
    for i in range(k):
        for j in range(k):
            if conf[i, j]:
                color = "white" if shares[i, j] > 0.5 else "black"
                ax.text(j, i, int(conf[i, j]), ha="center", va="center", color=color)
    fig.colorbar(image, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_comparison_chart(table: CompareTable, path) -> Path:
    """Baseline vs candidate UARs with significance marks above the bars."""
    path = Path(path)
    names = [table.baseline_name] + [row.name for row in table.rows]
    uars = [table.baseline_uar] + [row.uar for row in table.rows]
    marks = [""] + [row.mark for row in table.rows]

    fig, ax = plt.subplots(figsize=(1.5 + 1.1 * len(names), 4))
    colors = ["tab:gray"] + ["tab:blue"] * len(table.rows)
    bars = ax.bar(names, uars, color=colors)
    ax.axhline(table.chance, color="black", linestyle="--", linewidth=1, label="chance")
    for bar, mark in zip(bars, marks):
        if mark:
            ax.text(
                bar.get_x() + bar.get_width() / 2,
                bar.get_height() + 0.01,
                mark,
                ha="center",
                fontsize=14,
            )
    ax.set_ylabel("UAR")
    ax.set_ylim(0.0, 1.1)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
