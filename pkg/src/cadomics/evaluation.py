"""Classification metrics and the repeated stratified cross-validation harness."""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import registry
from .folds import FoldError, FoldPlan, derive_seed, stratified_kfold
from .gbdt import GBDTConfig
from .shap import canonical_order, fit_with_early_stopping, select_features_cv
from .table import FeatureTable, format_real

__all__ = [
    "FoldPlan", "stratified_kfold", "ConfusionCounts", "confusion_and_metrics", "auroc", "roc_curve",
    "auprc", "pr_curve", "evaluate_fold", "repeated_cv", "MetricsReport", "METRICS",
]

METRICS = ("sensitivity", "specificity", "accuracy", "f1", "auroc", "auprc")


class SingleClassError(ValueError):
    pass


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def _ratio(num: int, den: int) -> float | None:
    return None if den == 0 else num / den


def confusion_and_metrics(scores, labels, threshold: float = 0.5):
    """Counts plus sensitivity, specificity, accuracy and F1; ``None`` where a denominator is 0."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    if scores.size == 0:
        raise ValueError("no rows to evaluate")
    pred = scores >= threshold
    pos = labels == 1
    c = ConfusionCounts(
        tp=int(np.sum(pred & pos)),
        fp=int(np.sum(pred & ~pos)),
        tn=int(np.sum(~pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
    )
    sens = _ratio(c.tp, c.tp + c.fn)
    spec = _ratio(c.tn, c.tn + c.fp)
    acc = _ratio(c.tp + c.tn, c.total)
    f1 = _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn)
    return c, sens, spec, acc, f1


def _check_two_classes(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(np.sum(labels == 1))
    if n_pos == 0 or n_pos == labels.size:
        raise SingleClassError("both classes are required")
    return scores, labels


def midranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(x.size, dtype=np.float64)
    i = 0
    n = x.size
    while i < n:
        j = i
        while j + 1 < n and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j + 2) / 2.0
        i = j + 1
    return ranks


def auroc(scores, labels) -> float:
    """Mann-Whitney estimate; tied positive/negative pairs count one half."""
    scores, labels = _check_two_classes(scores, labels)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    r = midranks(scores)
    return (math.fsum(r[pos]) - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def _threshold_counts(scores, labels):
    """Cumulative (tp, fp) when predicting positive for scores >= each distinct threshold (descending)."""
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order] == 1
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.cumsum(y)[last]
    fp = np.cumsum(~y)[last]
    return s[last], tp, fp


def roc_curve(scores, labels) -> list[tuple[float, float, float]]:
    """Points ``(threshold, fpr, tpr)`` from (inf, 0, 0) down through every distinct score."""
    scores, labels = _check_two_classes(scores, labels)
    thr, tp, fp = _threshold_counts(scores, labels)
    n_pos = int(np.sum(labels == 1))
    n_neg = labels.size - n_pos
    pts = [(math.inf, 0.0, 0.0)]
    pts += [(float(t), f / n_neg, p / n_pos) for t, p, f in zip(thr, tp, fp)]
    return pts


def trapezoid_area(points) -> float:
    total = 0.0
    for (_, x0, y0), (_, x1, y1) in zip(points[:-1], points[1:]):
        total += (x1 - x0) * (y0 + y1) / 2.0
    return total


def pr_curve(scores, labels) -> list[tuple[float, float, float]]:
    """Points ``(threshold, recall, precision)`` at every distinct score, descending."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(np.sum(labels == 1))
    if n_pos == 0:
        raise SingleClassError("average precision needs at least one positive")
    thr, tp, fp = _threshold_counts(scores, labels)
    return [(float(t), p / n_pos, p / (p + f)) for t, p, f in zip(thr, tp, fp)]


def auprc(scores, labels) -> float:
    """Average precision: precision at each distinct threshold times the recall gained there."""
    pts = pr_curve(scores, labels)
    total = 0.0
    prev_recall = 0.0
    for _, recall, precision in pts:
        total += (recall - prev_recall) * precision
        prev_recall = recall
    return total


def all_metrics(scores, labels, threshold: float) -> dict[str, float | None]:
    _, sens, spec, acc, f1 = confusion_and_metrics(scores, labels, threshold)
    two = 0 < int(np.sum(np.asarray(labels) == 1)) < len(labels)
    return {
        "sensitivity": sens,
        "specificity": spec,
        "accuracy": acc,
        "f1": f1,
        "auroc": auroc(scores, labels) if two else None,
        "auprc": auprc(scores, labels) if two else None,
    }


# -- repeated cross-validation ---------------------------------------------------


@dataclass
class FoldResult:
    valid_idx: np.ndarray
    scores: np.ndarray
    selected: list[str]
    best_iteration: int


def evaluate_fold(
    table: FeatureTable,
    train_idx: np.ndarray,
    valid_idx: np.ndarray,
    config: GBDTConfig,
    seed: int,
    top_k: int | None = None,
) -> FoldResult:
    """One outer fold: optional feature selection and the final fit both see only ``train_idx``."""
    train_idx = canonical_order(table, train_idx)
    columns = list(table.column_names)
    if top_k is not None:
        inner = table.rows(train_idx)
        ranking = select_features_cv(inner, config, 5, top_k, seed=derive_seed(seed, 3))
        columns = ranking.selected
    sub = table.select(columns)
    model = fit_with_early_stopping(sub, train_idx, config, derive_seed(seed, 4))
    scores = model.predict_proba(sub.rows(valid_idx).X)
    return FoldResult(np.asarray(valid_idx), scores, columns, model.best_iteration)


@dataclass
class RepeatResult:
    repeat: int
    seed: int
    oof_scores: np.ndarray  # aligned with table rows
    metrics: dict[str, float | None]
    predicted_positive_rate: float
    best_iterations: list[int]
    selected: list[list[str]]


def _aggregate(values):
    vals = [v for v in values if v is not None]
    mean = math.fsum(vals) / len(vals) if vals else None
    if len(vals) >= 2:
        sd = math.sqrt(math.fsum((v - mean) ** 2 for v in vals) / (len(vals) - 1))
    else:
        sd = None
    return {"mean": mean, "sd": sd, "n": len(vals)}


@dataclass
class MetricsReport:
    threshold: float
    k: int
    master_seed: int
    feature_group: str | None
    columns: list[str]
    repeats: list[RepeatResult]
    aggregate: dict[str, dict] = field(default_factory=dict)
    patient_ids: list[str] = field(default_factory=list)
    labels: np.ndarray | None = None

    def mean_scores(self) -> np.ndarray:
        """Per-patient out-of-fold score averaged over repeats (added in repeat order)."""
        total = np.zeros_like(self.repeats[0].oof_scores)
        for r in self.repeats:
            total += r.oof_scores
        return total / len(self.repeats)

    def to_dict(self) -> dict:
        return {
            "report": "cadomics-cv-metrics",
            "version": 1,
            "threshold": self.threshold,
            "k": self.k,
            "master_seed": self.master_seed,
            "feature_group": self.feature_group,
            "n_rows": len(self.patient_ids),
            "n_columns": len(self.columns),
            "repeats": [
                {
                    "repeat": r.repeat,
                    "seed": r.seed,
                    **r.metrics,
                    "predicted_positive_rate": r.predicted_positive_rate,
                    "best_iterations": r.best_iterations,
                }
                for r in self.repeats
            ],
            "aggregate": self.aggregate,
        }


def _run_repeat(table, config, k, threshold, top_k, master_seed, repeat) -> RepeatResult:
    seed = derive_seed(master_seed, repeat)
    try:
        plan = stratified_kfold(table.labels, k, seed, repeat)
    except FoldError as exc:
        raise FoldError(f"degenerate folds: {exc}") from exc
    oof = np.full(table.n_rows, np.nan)
    best, selected = [], []
    for f in range(k):
        res = evaluate_fold(table, plan.train_indices(f), plan.folds[f], config, derive_seed(seed, f), top_k)
        oof[res.valid_idx] = res.scores
        best.append(res.best_iteration)
        selected.append(res.selected)
    metrics = all_metrics(oof, table.labels, threshold)
    return RepeatResult(repeat, seed, oof, metrics, float(np.mean(oof >= threshold)), best, selected)


def repeated_cv(
    table: FeatureTable,
    config: GBDTConfig,
    k: int = 5,
    repeats: int = 25,
    threshold: float = 0.5,
    feature_group: str | None = None,
    *,
    master_seed: int = 0,
    top_k: int | None = None,
    threads: int = 1,
) -> MetricsReport:
    """Fresh stratified plan per repeat; metrics pooled over the repeat's folds; mean and sd across repeats.

    Repeats may run on ``threads`` workers; each repeat's seed depends only on
    the master seed and its index, so the report does not depend on scheduling.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    if feature_group is not None:
        table = table.select(registry.columns_for_group(table.column_names, feature_group))
    if not table.column_names:
        raise ValueError("no feature columns selected")

    def job(r):
        return _run_repeat(table, config, k, threshold, top_k, master_seed, r)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(job, range(repeats)))
    else:
        results = [job(r) for r in range(repeats)]
    agg = {m: _aggregate([r.metrics[m] for r in results]) for m in METRICS}
    return MetricsReport(threshold, k, master_seed, feature_group, list(table.column_names), results, agg, list(table.patient_ids), table.labels)


def curve_csv(points, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in points:
        w.writerow([format_real(v) for v in row])
    return buf.getvalue()
