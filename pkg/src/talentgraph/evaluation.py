"""Test-set metrics: balanced accuracy, MAE/RMSE, weighted F1, grouped AUC.

All functions take flat lists of :class:`EvalRecord` and are pure; degenerate
cases (e.g. single-class truth for the AUC) report None rather than a silent
zero. The AUC groups stages {0,1} as negatives and {2,3} as positives.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import ValidationError
from .profiles import STAGE_MAX, STAGE_MIN

HIGH_STAGE_THRESHOLD = 2  # stages >= this count as the positive group


@dataclass(frozen=True)
class EvalRecord:
    """Truth and prediction for one (candidate, selection) pair."""

    candidate_id: str
    selection_id: str
    true_stage: int
    predicted_stage: int
    score_high: float

    def __post_init__(self):
        for name in ("true_stage", "predicted_stage"):
            value = getattr(self, name)
            if not (STAGE_MIN <= value <= STAGE_MAX):
                raise ValidationError(f"{name}={value} not in [{STAGE_MIN}, {STAGE_MAX}]")
        if not (0.0 <= self.score_high <= 1.0):
            raise ValidationError(f"score_high={self.score_high} not in [0, 1]")


@dataclass(frozen=True)
class MetricReport:
    balanced_accuracy: float
    mae: float
    rmse: float
    weighted_f1: float
    auc: float | None
    support: Mapping[int, int]

    def to_json(self) -> dict:
        return {
            "balanced_accuracy": self.balanced_accuracy,
            "mae": self.mae,
            "rmse": self.rmse,
            "weighted_f1": self.weighted_f1,
            "auc": self.auc,
            "support": {str(k): v for k, v in sorted(self.support.items())},
        }


def _require(records: Sequence[EvalRecord]) -> None:
    if not records:
        raise ValidationError("metrics require at least one record")


def balanced_accuracy(records: Sequence[EvalRecord]) -> float:
    """Mean per-class recall over the classes present in the truth."""
    _require(records)
    truth = np.array([r.true_stage for r in records])
    pred = np.array([r.predicted_stage for r in records])
    recalls = []
    for stage in sorted(set(truth.tolist())):
        mask = truth == stage
        recalls.append(float((pred[mask] == stage).mean()))
    return float(np.mean(recalls))


def mae_rmse(records: Sequence[EvalRecord]) -> tuple[float, float]:
    """Mean absolute and root-mean-square error on integer stage codes."""
    _require(records)
    diff = np.array([r.predicted_stage - r.true_stage for r in records], dtype=np.float64)
    return float(np.abs(diff).mean()), float(np.sqrt((diff**2).mean()))


def weighted_f1(records: Sequence[EvalRecord]) -> float:
    """Support-weighted mean of per-class F1; absent classes contribute F1 = 0."""
    _require(records)
    truth = np.array([r.true_stage for r in records])
    pred = np.array([r.predicted_stage for r in records])
    total = len(records)
    score = 0.0
    for stage in sorted(set(truth.tolist())):
        support = int((truth == stage).sum())
        tp = int(((truth == stage) & (pred == stage)).sum())
        fp = int(((truth != stage) & (pred == stage)).sum())
        fn = support - tp
        if tp == 0:
            f1 = 0.0
        else:
            precision = tp / (tp + fp)
            recall = tp / (tp + fn)
            f1 = 2 * precision * recall / (precision + recall)
        score += (support / total) * f1
    return float(score)


def grouped_auc(records: Sequence[EvalRecord]) -> float | None:
    """Binary ranking AUC of score_high with stages {0,1} vs {2,3}.

    Mann-Whitney formulation; ties count one half. Returns None when the
    truth contains only one group.
    """
    _require(records)
    labels = np.array([r.true_stage >= HIGH_STAGE_THRESHOLD for r in records])
    scores = np.array([r.score_high for r in records], dtype=np.float64)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores, method="average")
    rank_sum = float(ranks[labels].sum())
    u_stat = rank_sum - n_pos * (n_pos + 1) / 2.0
    return float(u_stat / (n_pos * n_neg))


def support_counts(records: Sequence[EvalRecord]) -> dict[int, int]:
    counts = {stage: 0 for stage in range(STAGE_MIN, STAGE_MAX + 1)}
    for record in records:
        counts[record.true_stage] += 1
    return counts


def compute_metrics(records: Sequence[EvalRecord]) -> MetricReport:
    mae, rmse = mae_rmse(records)
    return MetricReport(
        balanced_accuracy=balanced_accuracy(records),
        mae=mae,
        rmse=rmse,
        weighted_f1=weighted_f1(records),
        auc=grouped_auc(records),
        support=support_counts(records),
    )


def per_selection_metrics(records: Sequence[EvalRecord]) -> dict[str, MetricReport]:
    groups: dict[str, list[EvalRecord]] = {}
    for record in records:
        groups.setdefault(record.selection_id, []).append(record)
    return {sid: compute_metrics(groups[sid]) for sid in sorted(groups)}


def save_metrics(
    pooled: MetricReport,
    per_selection: Mapping[str, MetricReport],
    path: str | Path,
) -> None:
    payload = {
        "pooled": pooled.to_json(),
        "per_selection": {sid: report.to_json() for sid, report in sorted(per_selection.items())},
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def save_records(records: Sequence[EvalRecord], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for r in records:
            obj = {
                "candidate_id": r.candidate_id,
                "selection_id": r.selection_id,
                "true_stage": r.true_stage,
                "predicted_stage": r.predicted_stage,
                "score_high": r.score_high,
            }
            fh.write(json.dumps(obj) + "\n")
