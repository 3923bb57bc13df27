"""Report figures (matplotlib, file output only)."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import EvalReport  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # same-directory temp name, renamed into place
    tmp = path.with_name(f".{path.stem}.tmp{path.suffix}")
    fig.savefig(tmp, dpi=120)
    plt.close(fig)
    os.replace(tmp, path)
    return path


def metric_bars(reports: Sequence[EvalReport], metric: str, path, title: str | None = None) -> Path:
    """Grouped per-domain bars, one group per domain and one bar per report."""
    domains = [r.domain for r in reports[0].rows]
    x = np.arange(len(domains))
    width = 0.8 / max(1, len(reports))
    fig, ax = plt.subplots(figsize=(max(6, 1.2 * len(domains)), 4))
    for i, rep in enumerate(reports):
        vals = [getattr(rep.row(d), metric) for d in domains]
        vals = [np.nan if v is None else v for v in vals]
        ax.bar(x + (i - (len(reports) - 1) / 2) * width, vals, width, label=rep.model)
    ax.set_xticks(x)
    ax.set_xticklabels(domains)
    ax.set_ylabel(metric)
    ax.set_title(title or f"{metric} by domain")
    if len(reports) > 1:
        ax.legend(fontsize=8)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def loss_curves(histories: dict[str, Sequence[float]], path, ylabel: str = "loss") -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, ys in histories.items():
        ax.plot(np.arange(1, len(ys) + 1), ys, label=name, lw=1.2)
    ax.set_xlabel("optimizer step")
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def report_figures(reports: Sequence[EvalReport], out_dir, stem: str = "report") -> list[Path]:
    """One bar chart per metric that has at least one value."""
    out = []
    for metric in ("ppl", "bleu4", "rouge_l", "router_acc", "exam_acc"):
        if any(getattr(row, metric) is not None for rep in reports for row in rep.rows):
            out.append(metric_bars(reports, metric, Path(out_dir) / f"{stem}_{metric}.png"))
    return out
