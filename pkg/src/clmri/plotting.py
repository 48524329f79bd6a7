"""SVG figures for experiment reports (matplotlib, Agg backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# Fixed metadata keeps the SVG bytes independent of the run date.
_SVG_META = {"Date": None, "Creator": "clmri"}
plt.rcParams["svg.hashsalt"] = "clmri"


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)
    return path


def metric_vs_acceleration(summary: Sequence[Mapping], metric: str, path, title: str = "") -> Path:
    """One line (with std error bars) per (model, mode) group of a summary table."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    groups: dict[tuple, list[Mapping]] = {}
    for row in summary:
        groups.setdefault((row.get("model", ""), row.get("mode", "")), []).append(row)
    for (model, mode), rows in sorted(groups.items()):
        rows = sorted(rows, key=lambda r: float(r["acceleration"]))
        ax.errorbar([float(r["acceleration"]) for r in rows], [r[f"{metric}_mean"] for r in rows],
                    yerr=[r[f"{metric}_std"] for r in rows], marker="o", capsize=3, label=f"{model} {mode}")
    ax.set_xlabel("acceleration")
    ax.set_ylabel(metric.upper())
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def grouped_bars(categories: Sequence[str], series: Mapping[str, Sequence[float]], path, ylabel: str,
                 errors: Mapping[str, Sequence[float]] | None = None, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    n = max(len(series), 1)
    width = 0.8 / n
    for i, (label, values) in enumerate(series.items()):
        xs = [j + (i - (n - 1) / 2) * width for j in range(len(categories))]
        ax.bar(xs, values, width, yerr=None if errors is None else errors.get(label), capsize=3, label=label)
    ax.set_xticks(range(len(categories)))
    ax.set_xticklabels(categories)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def pair_histograms(before: Mapping, after: Mapping, path) -> Path:
    """Positive-pair distance histograms per acceleration pair, before and after pretraining."""
    keys = list(before)
    cols = 3
    rows = -(-len(keys) // cols)
    fig, axes = plt.subplots(rows, cols, figsize=(3 * cols, 2.4 * rows), squeeze=False)
    for ax, key in zip(axes.flat, keys):
        for hist, label in ((before[key], "init"), (after[key], "pretrained")):
            ax.stairs(hist.counts, hist.edges, label=label, fill=False)
        ax.set_title(key, fontsize=9)
    for ax in list(axes.flat)[len(keys):]:
        ax.axis("off")
    axes.flat[0].legend(fontsize=7)
    fig.supxlabel("l2 distance")
    fig.tight_layout()
    return _save(fig, path)


def loss_curves(curves: Mapping[str, Sequence[float]], path, ylabel: str = "validation loss") -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, values in curves.items():
        ax.plot(range(len(values)), values, marker=".", label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel(ylabel)
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def mi_scatter(points: Mapping[str, tuple[Sequence[float], Sequence[float]]], path, ylabel: str) -> Path:
    """MI with the ground truth (x) against a reconstruction metric (y), one series per input kind."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, (xs, ys) in points.items():
        ax.scatter(xs, ys, s=8, label=label)
    ax.set_xlabel("mutual information with ground truth (nats)")
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)
