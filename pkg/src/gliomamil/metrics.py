"""Classification metrics: confusion-matrix rates, ROC AUC, and the text report."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

BINARY_TASKS = ("idh", "1p19q", "cdkn", "nmp")


@dataclass(frozen=True)
class BinaryMetrics:
    accuracy: float
    sensitivity: float | None
    specificity: float | None
    f1: float
    auc: float | None


@dataclass(frozen=True)
class MulticlassMetrics:
    accuracy: float
    sensitivity: float | None
    specificity: float | None
    f1: float


@dataclass(frozen=True)
class MetricsReport:
    tasks: dict[str, BinaryMetrics]
    glioma: MulticlassMetrics
    consistency: float

    def macro_auc(self) -> float | None:
        aucs = [m.auc for m in self.tasks.values() if m.auc is not None]
        return float(np.mean(aucs)) if aucs else None


def confusion(y_true, y_pred) -> tuple[int, int, int, int]:
    """(tp, fp, tn, fn) for binary labels."""
    t = np.asarray(y_true).astype(bool)
    p = np.asarray(y_pred).astype(bool)
    return int(np.sum(t & p)), int(np.sum(~t & p)), int(np.sum(~t & ~p)), int(np.sum(t & ~p))


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


def roc_curve(y_true, scores) -> tuple[np.ndarray, np.ndarray]:
    """(fpr, tpr) at every distinct score threshold, highest first, starting at (0, 0)."""
    t = np.asarray(y_true).astype(bool)
    s = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-s, kind="stable")
    s, t = s[order], t[order]
    # last index of each block of tied scores
    cut = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tps = np.cumsum(t)[cut]
    fps = np.cumsum(~t)[cut]
    pos, neg = int(t.sum()), int((~t).sum())
    tpr = np.r_[0.0, tps / pos if pos else np.zeros_like(tps, dtype=float)]
    fpr = np.r_[0.0, fps / neg if neg else np.zeros_like(fps, dtype=float)]
    return fpr, tpr


def roc_auc(y_true, scores) -> float | None:
    """Trapezoidal area under the ROC curve; tied scores form one diagonal segment.

    Returns None when only one class is present.
    """
    t = np.asarray(y_true).astype(bool)
    if t.all() or not t.any():
        return None
    fpr, tpr = roc_curve(t, scores)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) * 0.5))


def binary_metrics(y_true, y_pred, scores=None) -> BinaryMetrics:
    tp, fp, tn, fn = confusion(y_true, y_pred)
    total = tp + fp + tn + fn
    if total == 0:
        raise ValueError("metrics need a non-empty evaluation set")
    f1 = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0
    auc = roc_auc(y_true, scores) if scores is not None else None
    return BinaryMetrics((tp + tn) / total, _ratio(tp, tp + fn), _ratio(tn, tn + fp), f1, auc)


def multiclass_metrics(y_true, y_pred, n_classes: int = 4) -> MulticlassMetrics:
    """Accuracy plus one-vs-rest rates macro-averaged over classes where defined."""
    t = np.asarray(y_true)
    p = np.asarray(y_pred)
    if t.size == 0:
        raise ValueError("metrics need a non-empty evaluation set")
    sens, spec, f1s = [], [], []
    for c in range(n_classes):
        m = binary_metrics(t == c, p == c)
        if m.sensitivity is not None:
            sens.append(m.sensitivity)
        if m.specificity is not None:
            spec.append(m.specificity)
        if np.any(t == c) or np.any(p == c):
            f1s.append(m.f1)
    return MulticlassMetrics(
        float(np.mean(t == p)),
        float(np.mean(sens)) if sens else None,
        float(np.mean(spec)) if spec else None,
        float(np.mean(f1s)) if f1s else 0.0,
    )


def compute_metrics(
    predictions: Mapping[str, np.ndarray],
    scores: Mapping[str, np.ndarray],
    labels: Mapping[str, np.ndarray],
    consistency: float,
) -> MetricsReport:
    """Assemble the full report.

    ``predictions`` and ``labels`` map each binary task and ``"glioma"`` to
    integer arrays; ``scores`` maps binary tasks to P(class 1).
    """
    tasks = {
        t: binary_metrics(labels[t], predictions[t], scores[t])
        for t in BINARY_TASKS
    }
    glioma = multiclass_metrics(labels["glioma"], predictions["glioma"])
    return MetricsReport(tasks, glioma, consistency)


def _pct(v: float | None) -> str:
    return f"{'NA':>11}" if v is None else f"{100.0 * v:>11.4f}"


REPORT_HEADER = f"{'task':<8}{'accuracy':>11}{'sensitivity':>12}{'specificity':>12}{'f1':>11}{'auc':>11}"


def format_report(report: MetricsReport) -> str:
    """Fixed-column text report; values are percentages, NA where undefined."""
    lines = [REPORT_HEADER]
    for task, m in report.tasks.items():
        lines.append(f"{task:<8}{_pct(m.accuracy)} {_pct(m.sensitivity)} {_pct(m.specificity)}{_pct(m.f1)}{_pct(m.auc)}")
    g = report.glioma
    lines.append(f"{'glioma':<8}{_pct(g.accuracy)} {_pct(g.sensitivity)} {_pct(g.specificity)}{_pct(g.f1)}{_pct(None)}")
    macro = report.macro_auc()
    lines.append(f"{'macro_auc':<20}{_pct(macro)}")
    lines.append(f"{'consistency':<20}{_pct(report.consistency)}")
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> dict[str, dict[str, float | None]]:
    """Inverse of :func:`format_report` (values back in [0, 1])."""
    rows = text.strip().splitlines()
    fields = rows[0].split()[1:]
    out: dict[str, dict[str, float | None]] = {}

    def val(tok: str) -> float | None:
        return None if tok == "NA" else float(tok) / 100.0

    for row in rows[1:]:
        parts = row.split()
        if len(parts) == 2:
            out[parts[0]] = {"value": val(parts[1])}
        else:
            out[parts[0]] = dict(zip(fields, map(val, parts[1:])))
    return out

