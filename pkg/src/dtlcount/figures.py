"""Matplotlib renderings of run artifacts.

All figures draw from already-computed report rows or histories, never from
live training state, and render through the Agg backend with fixed sizes so
the emitted PNG bytes are deterministic for identical inputs.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

_FIGSIZE = (6.0, 4.0)
_DPI = 110


def _finish(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def stage_mae_figure(report_rows, path, title="MAE per transfer stage"):
    """Bar chart: evaluation MAE after each pipeline stage."""
    stages = [row["stage"] for row in report_rows]
    maes = [row["mae"] for row in report_rows]
    fig, ax = plt.subplots(figsize=_FIGSIZE)
    bars = ax.bar(range(len(stages)), maes, color="#4878cf")
    ax.set_xticks(range(len(stages)))
    ax.set_xticklabels(stages)
    ax.set_ylabel("MAE (cells)")
    ax.set_title(title)
    for bar, value in zip(bars, maes):
        ax.annotate(f"{value:.2f}", (bar.get_x() + bar.get_width() / 2, value),
                    ha="center", va="bottom", fontsize=9)
    _finish(fig, path)


def loss_curves_figure(history, path, title="Training loss by stage"):
    """Loss traces over every training epoch, with stage boundaries marked."""
    rows = [h for h in history if "loss_total" in h]
    fig, ax = plt.subplots(figsize=_FIGSIZE)
    if rows:
        xs = range(len(rows))
        ax.plot(xs, [r["loss_total"] for r in rows], label="total", color="#333333")
        ax.plot(xs, [r["loss_mse"] for r in rows], label="mse", color="#4878cf")
        ax.plot(xs, [r["loss_perc"] for r in rows], label="perceptual",
                color="#d65f5f")
        previous = rows[0]["stage"]
        for x, row in enumerate(rows):
            if row["stage"] != previous:
                ax.axvline(x - 0.5, color="#999999", linestyle=":")
                previous = row["stage"]
        ax.set_yscale("log")
        ax.legend()
    ax.set_xlabel("epoch (all stages concatenated)")
    ax.set_ylabel("loss")
    ax.set_title(title)
    _finish(fig, path)


def method_comparison_figure(rows, path, title="Transfer vs direct training"):
    """Grouped bars: final MAE per seed for each method, plus the mean.

    ``rows`` are mappings with ``method``, ``seed`` and ``mae`` keys.
    """
    methods = sorted({row["method"] for row in rows})
    seeds = sorted({row["seed"] for row in rows})
    fig, ax = plt.subplots(figsize=_FIGSIZE)
    width = 0.8 / max(1, len(methods))
    for offset, method in enumerate(methods):
        by_seed = {row["seed"]: row["mae"] for row in rows
                   if row["method"] == method}
        values = [by_seed.get(seed, float("nan")) for seed in seeds]
        xs = [i + offset * width for i in range(len(seeds))]
        ax.bar(xs, values, width=width, label=method)
        present = [v for v in values if v == v]
        if present:
            mean = sum(present) / len(present)
            ax.axhline(mean, linestyle="--", linewidth=1,
                       color=ax.containers[-1].patches[0].get_facecolor())
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(seeds))])
    ax.set_xticklabels([f"seed {seed}" for seed in seeds])
    ax.set_ylabel("final MAE (cells)")
    ax.set_title(title)
    if methods:
        ax.legend()
    _finish(fig, path)


def count_scatter_figure(per_image, path, title="Predicted vs true counts"):
    """Scatter of (truth, predicted) pairs with the identity diagonal."""
    truth = [t for t, _ in per_image]
    predicted = [p for _, p in per_image]
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    top = max([1.0] + truth + predicted) * 1.1
    ax.plot([0, top], [0, top], color="#bbbbbb", linewidth=1)
    ax.scatter(truth, predicted, color="#4878cf", zorder=3)
    ax.set_xlim(0, top)
    ax.set_ylim(0, top)
    ax.set_xlabel("true count")
    ax.set_ylabel("predicted count")
    ax.set_title(title)
    _finish(fig, path)
