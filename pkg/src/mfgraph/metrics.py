"""Binary detection metrics and drift tables."""

from __future__ import annotations

import csv
import json
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .errors import DataError

METRIC_NAMES = ("accuracy", "precision", "recall", "f1", "auc")


@dataclass(frozen=True)
class Confusion:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self):
        return self.tp + self.tn + self.fp + self.fn


def confusion(preds, truths) -> Confusion:
    preds = np.asarray(preds, dtype=np.int64)
    truths = np.asarray(truths, dtype=np.int64)
    if preds.shape != truths.shape:
        raise ValueError(f"length mismatch: {preds.shape} predictions vs {truths.shape} labels")
    if not np.isin(preds, (0, 1)).all() or not np.isin(truths, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return Confusion(
        tp=int(np.sum((preds == 1) & (truths == 1))),
        tn=int(np.sum((preds == 0) & (truths == 0))),
        fp=int(np.sum((preds == 1) & (truths == 0))),
        fn=int(np.sum((preds == 0) & (truths == 1))),
    )


def scalar_metrics(c: Confusion):
    """(accuracy, precision, recall, f1); zero denominators give 0."""
    if c.total == 0:
        raise ValueError("empty confusion matrix")
    accuracy = (c.tp + c.tn) / c.total
    precision = c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
    recall = c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return accuracy, precision, recall, f1


def roc_auc(scores, truths) -> float:
    """Probability that a random positive outscores a random negative,
    ties counting one half (Mann-Whitney form, via average ranks)."""
    scores = np.asarray(scores, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.int64)
    if scores.shape != truths.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(np.sum(truths == 1))
    n_neg = int(np.sum(truths == 0))
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUC is undefined unless both classes are present")
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(len(scores))
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum = ranks[truths == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class MetricsReport:
    dataset: str
    n: int
    accuracy: float
    precision: float
    recall: float
    f1: float
    auc: float | None
    confusion: Confusion | None = None

    def as_row(self):
        return {
            "dataset": self.dataset,
            "n": self.n,
            **{m: "" if getattr(self, m) is None else repr(float(getattr(self, m))) for m in METRIC_NAMES},
        }


def evaluate_scores(scores, truths, dataset="", threshold=0.5) -> MetricsReport:
    """Report for positive-class scores; predicted malicious when score >= threshold."""
    scores = np.asarray(scores, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.int64)
    if len(scores) == 0:
        raise DataError(f"dataset {dataset!r} is empty")
    c = confusion((scores >= threshold).astype(np.int64), truths)
    acc, prec, rec, f1 = scalar_metrics(c)
    both = 0 < truths.sum() < len(truths)
    auc = roc_auc(scores, truths) if both else None
    return MetricsReport(dataset, len(scores), acc, prec, rec, f1, auc, c)


@dataclass
class DriftTable:
    months: "OrderedDict[str, MetricsReport]"
    best: dict
    worst: dict
    degradation: dict  # percentage points


def drift_table(reports) -> DriftTable:
    """Best, worst and DegRate (best - worst, in percentage points) per metric.

    ``reports`` is a mapping month -> MetricsReport or a list of reports
    (their ``dataset`` tag is the month key). Months are kept in sorted order.
    """
    if isinstance(reports, dict):
        items = list(reports.items())
    else:
        items = [(r.dataset, r) for r in reports]
    if not items:
        raise ValueError("drift table needs at least one month")
    months = OrderedDict(sorted(items, key=lambda kv: kv[0]))
    best, worst, deg = {}, {}, {}
    for m in METRIC_NAMES:
        series = [getattr(r, m) for r in months.values() if getattr(r, m) is not None]
        if not series:
            continue
        hi, lo = 100.0 * max(series), 100.0 * min(series)
        best[m], worst[m] = hi, lo
        deg[m] = hi - lo
    return DriftTable(months, best, worst, deg)


# --------------------------------------------------------------------------
# reporting
# --------------------------------------------------------------------------

def write_report_csv(reports, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["dataset", "n", *METRIC_NAMES], lineterminator="\n")
        writer.writeheader()
        for r in reports:
            writer.writerow(r.as_row())


def write_drift_csv(table: DriftTable, path) -> None:
    """Per-month rows followed by Best / Worst / DegRate rows (percent)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["subset", "n", *METRIC_NAMES])
        for month, r in table.months.items():
            writer.writerow([f"Test-{month}", r.n] + [
                "" if getattr(r, m) is None else repr(float(getattr(r, m))) for m in METRIC_NAMES
            ])
        for label, values in (("Best", table.best), ("Worst", table.worst), ("DegRate", table.degradation)):
            writer.writerow([label, ""] + [repr(float(values[m])) if m in values else "" for m in METRIC_NAMES])


def write_score_dump(scores, truths, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s, t in zip(scores, truths):
            fh.write(json.dumps({"score": float(s), "truth": int(t)}) + "\n")
