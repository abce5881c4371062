"""Report rendering: delimited metric tables, a plain-text summary, figures.

Metrics stay as fractions in metrics.json; the rendered tables show balanced
accuracy as a percentage. Figures are written as PNG files next to the
tables: training loss curve, true-vs-predicted stage counts, and the score
distribution of the two AUC groups.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluation import HIGH_STAGE_THRESHOLD, EvalRecord, MetricReport
from .profiles import STAGE_MAX, STAGE_MIN

COLUMNS = ("Model", "Learning", "Acc.", "MAE", "RMSE", "F1", "AUC")


def _row(model: str, learning: str, report: MetricReport) -> tuple[str, ...]:
    auc = f"{report.auc:.3f}" if report.auc is not None else "n/a"
    return (
        model,
        learning,
        f"{100.0 * report.balanced_accuracy:.1f}",
        f"{report.mae:.3f}",
        f"{report.rmse:.3f}",
        f"{report.weighted_f1:.3f}",
        auc,
    )


def write_metrics_tsv(
    pooled: MetricReport,
    per_selection: Mapping[str, MetricReport],
    path: str | Path,
    model: str = "GCN",
    learning: str = "Multilabel",
) -> None:
    """Tab-separated table: one pooled row plus one row per selection."""
    lines = ["\t".join(COLUMNS)]
    lines.append("\t".join(_row(model, learning, pooled)))
    for sid in sorted(per_selection):
        lines.append("\t".join(_row(f"{model}[{sid}]", learning, per_selection[sid])))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_metrics_text(
    pooled: MetricReport,
    per_selection: Mapping[str, MetricReport],
    path: str | Path,
    model: str = "GCN",
    learning: str = "Multilabel",
) -> None:
    """Fixed-width summary table for terminals."""
    rows = [COLUMNS, _row(model, learning, pooled)]
    for sid in sorted(per_selection):
        rows.append(_row(f"{model}[{sid}]", learning, per_selection[sid]))
    widths = [max(len(row[col]) for row in rows) for col in range(len(COLUMNS))]
    out = []
    for idx, row in enumerate(rows):
        out.append("  ".join(cell.ljust(widths[col]) for col, cell in enumerate(row)).rstrip())
        if idx == 0:
            out.append("  ".join("-" * w for w in widths))
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")


def render_loss_curve(loss_trace: Sequence[float], path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(range(1, len(loss_trace) + 1), loss_trace, lw=1.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean train loss")
    ax.set_title("Training loss")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_stage_counts(records: Sequence[EvalRecord], path: str | Path) -> None:
    stages = range(STAGE_MIN, STAGE_MAX + 1)
    truth = [sum(1 for r in records if r.true_stage == s) for s in stages]
    pred = [sum(1 for r in records if r.predicted_stage == s) for s in stages]
    x = np.arange(len(list(stages)))
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(x - 0.2, truth, width=0.4, label="true")
    ax.bar(x + 0.2, pred, width=0.4, label="predicted")
    ax.set_xticks(x)
    ax.set_xticklabels([str(s) for s in stages])
    ax.set_xlabel("stage")
    ax.set_ylabel("pairs")
    ax.set_yscale("log")
    ax.set_title("Stage counts (test pairs)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_score_split(records: Sequence[EvalRecord], path: str | Path) -> None:
    low = [r.score_high for r in records if r.true_stage < HIGH_STAGE_THRESHOLD]
    high = [r.score_high for r in records if r.true_stage >= HIGH_STAGE_THRESHOLD]
    bins = np.linspace(0.0, 1.0, 21)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(low, bins=bins, alpha=0.6, label="stage 0-1", density=True)
    if high:
        ax.hist(high, bins=bins, alpha=0.6, label="stage 2-3", density=True)
    ax.set_xlabel("predicted P(stage >= 2)")
    ax.set_ylabel("density")
    ax.set_title("Score separation of AUC groups")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_figures(
    out_dir: str | Path,
    records: Sequence[EvalRecord],
    loss_trace: Sequence[float] | None = None,
) -> list[Path]:
    """Write all report figures into ``out_dir``; returns the created paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    if loss_trace:
        target = out_dir / "loss_curve.png"
        render_loss_curve(loss_trace, target)
        written.append(target)
    target = out_dir / "stage_counts.png"
    render_stage_counts(records, target)
    written.append(target)
    target = out_dir / "score_split.png"
    render_score_split(records, target)
    written.append(target)
    return written
