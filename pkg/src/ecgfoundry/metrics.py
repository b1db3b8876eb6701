"""Ranking metrics, the Criteria aggregate, and the four-term risk decomposition."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import rankdata

from .data import TASKS


class UndefinedMetricError(ValueError):
    pass


def _as_arrays(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    return s, y


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC; tied pos/neg pairs count one half."""
    s, y = _as_arrays(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both classes")
    ranks = rankdata(s)  # average ranks for ties, all exact half-integers
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Average precision: sum of recall steps times precision, ties as a block."""
    s, y = _as_arrays(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("AUPRC needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # last index of each block of tied scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(y)[ends]
    seen = ends + 1
    d_tp = np.diff(np.r_[0, tp])
    return float(np.sum(d_tp / n_pos * tp / seen))


def f1(scores, labels, threshold: float = 0.5) -> float:
    s, y = _as_arrays(scores, labels)
    pred = s >= threshold
    tp = int(np.sum(pred & y))
    fp = int(np.sum(pred & ~y))
    fn = int(np.sum(~pred & y))
    if tp == 0:
        return 0.0
    p = tp / (tp + fp)
    r = tp / (tp + fn)
    return 2 * p * r / (p + r)


@dataclass
class TaskMetrics:
    auroc: float
    auprc: float
    f1: Optional[float] = None


@dataclass
class EvalReport:
    tasks: dict[str, TaskMetrics]
    meta: dict = field(default_factory=dict)

    @property
    def criteria(self) -> float:
        return criteria(self)

    def to_dict(self) -> dict:
        return {"tasks": {t: asdict(m) for t, m in self.tasks.items()},
                "criteria": self.criteria, "meta": self.meta}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls({t: TaskMetrics(**m) for t, m in d["tasks"].items()}, d.get("meta", {}))


def criteria(report) -> float:
    """Sum of the per-task AUROCs and AUPRCs.

    Accepts an EvalReport or a mapping task -> (auroc, auprc) or
    task -> {"auroc": .., "auprc": ..}.
    """
    tasks = report.tasks if isinstance(report, EvalReport) else report
    total = 0.0
    for m in tasks.values():
        if isinstance(m, TaskMetrics):
            total += m.auroc + m.auprc
        elif isinstance(m, dict):
            total += m["auroc"] + m["auprc"]
        else:
            total += m[0] + m[1]
    return total


def evaluate_scores(scores: dict[str, np.ndarray], labels: dict[str, np.ndarray], **meta) -> EvalReport:
    out = {}
    for task in scores:
        out[task] = TaskMetrics(auroc(scores[task], labels[task]), auprc(scores[task], labels[task]),
                                f1(scores[task], labels[task]))
    return EvalReport(out, meta)


# --- risk decomposition ------------------------------------------------------

@dataclass
class RiskMeasurements:
    """Risks (1 - AUROC) of the constituent models for one task."""

    supervised_train: float
    probe_train: float
    probe_test: float
    probe_test_half_encoder: float


@dataclass
class RiskReport:
    approximation_error: float
    representation_usability_error: float
    probe_generalization_error: float
    encoder_generalization_error: float

    def to_dict(self) -> dict:
        return asdict(self)


def decompose(m: RiskMeasurements) -> RiskReport:
    approx = m.supervised_train
    return RiskReport(
        approximation_error=approx,
        representation_usability_error=m.probe_train - approx,
        probe_generalization_error=m.probe_test - m.probe_train,
        encoder_generalization_error=m.probe_test_half_encoder - m.probe_test,
    )


def risk(scores, labels) -> float:
    return 1.0 - auroc(scores, labels)


