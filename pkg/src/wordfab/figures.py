"""Matplotlib figure rendering for report outputs.

Figures are written next to the delimited report files so a run leaves a
self-contained output directory. Headless backend; no interactive display.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .bench import VARIANCE_METRICS, EvalReport

_DPI = 150


def save_similarity_histogram(
    values: Sequence[float],
    path: str | Path,
    title: str = "Ground truth vs fabrication embedding similarity",
    bins: int = 20,
) -> None:
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    ax.hist(values, bins=bins, range=(min(0.0, min(values)), 1.0), color="#4878b0", edgecolor="white")
    ax.set_xlabel("cosine similarity")
    ax.set_ylabel("pairs")
    ax.set_title(title)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def save_metric_bars(report: EvalReport, path: str | Path, title: str = "Per-class metrics") -> None:
    classes = ("fabrication", "ground_truth", "overall")
    width = 0.25
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    for i, metric in enumerate(VARIANCE_METRICS):
        xs = [j + (i - 1) * width for j in range(len(classes))]
        ys = [report.metric(cls, metric) for cls in classes]
        ax.bar(xs, ys, width=width, label=metric)
    ax.set_xticks(range(len(classes)))
    ax.set_xticklabels(cls.replace("_", " ") for cls in classes)
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel("score")
    ax.set_title(title)
    ax.legend(loc="lower right")
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
