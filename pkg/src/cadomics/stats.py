"""Model-comparison and cohort-table significance tests."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats as sps

from .evaluation import SingleClassError, auroc

MCNEMAR_EXACT_BELOW = 25


@dataclass
class DeLongResult:
    auc_a: float
    auc_b: float
    z: float
    p: float
    variance: float  # estimated var(auc_a - auc_b)


def placement_values(scores, labels):
    """Per-positive and per-negative placement values (ties count one half)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels != 1]
    neg_sorted = np.sort(neg)
    pos_sorted = np.sort(pos)
    # fraction of negatives below each positive, ties half
    v10 = (np.searchsorted(neg_sorted, pos, "left") + np.searchsorted(neg_sorted, pos, "right")) / (2.0 * neg.size)
    # fraction of positives above each negative, ties half
    v01 = 1.0 - (np.searchsorted(pos_sorted, neg, "left") + np.searchsorted(pos_sorted, neg, "right")) / (2.0 * pos.size)
    return v10, v01


def auc_variance(scores, labels) -> float:
    v10, v01 = placement_values(scores, labels)
    return np.var(v10, ddof=1) / v10.size + np.var(v01, ddof=1) / v01.size


def delong_test(scores_a, scores_b, labels) -> DeLongResult:
    """Two-sided test of equal AUROC for two scorers on the same rows."""
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    labels = np.asarray(labels)
    if not (a.shape == b.shape == labels.shape):
        raise ValueError("scores and labels differ in length")
    n_pos = int(np.sum(labels == 1))
    if n_pos < 2 or labels.size - n_pos < 2:
        raise SingleClassError("each class needs at least two rows")
    auc_a = auroc(a, labels)
    auc_b = auroc(b, labels)
    a10, a01 = placement_values(a, labels)
    b10, b01 = placement_values(b, labels)
    d10 = a10 - b10
    d01 = a01 - b01
    var = float(np.var(d10, ddof=1) / d10.size + np.var(d01, ddof=1) / d01.size)
    diff = auc_a - auc_b
    if var <= 0.0:
        if diff == 0.0:
            return DeLongResult(auc_a, auc_b, 0.0, 1.0, 0.0)
        return DeLongResult(auc_a, auc_b, math.copysign(math.inf, diff), 0.0, 0.0)
    z = diff / math.sqrt(var)
    p = float(2.0 * sps.norm.sf(abs(z)))
    return DeLongResult(auc_a, auc_b, z, min(1.0, p), var)


@dataclass
class McNemarResult:
    b: int  # a correct, b wrong
    c: int  # a wrong, b correct
    statistic: float  # continuity-corrected chi-square
    p: float
    method: str  # "exact" or "chi2"


def mcnemar_test(preds_a, preds_b, labels) -> McNemarResult:
    """Paired test on discordant correctness.

    The statistic is always ``(|b - c| - 1)^2 / (b + c)``; the p-value comes
    from the exact binomial when ``b + c < 25`` and from chi-square otherwise.
    """
    pa = np.asarray(preds_a).astype(int)
    pb = np.asarray(preds_b).astype(int)
    y = np.asarray(labels).astype(int)
    if not (pa.shape == pb.shape == y.shape):
        raise ValueError("predictions and labels differ in length")
    ok_a = pa == y
    ok_b = pb == y
    b = int(np.sum(ok_a & ~ok_b))
    c = int(np.sum(~ok_a & ok_b))
    return mcnemar_from_counts(b, c)


def mcnemar_from_counts(b: int, c: int) -> McNemarResult:
    n = b + c
    if n == 0:
        return McNemarResult(b, c, 0.0, 1.0, "exact")
    stat = (abs(b - c) - 1) ** 2 / n
    if n < MCNEMAR_EXACT_BELOW:
        p = float(sps.binomtest(b, n, 0.5).pvalue)
        return McNemarResult(b, c, stat, min(1.0, p), "exact")
    return McNemarResult(b, c, stat, float(sps.chi2.sf(stat, 1)), "chi2")


@dataclass
class TTestResult:
    t: float
    df: float
    p: float


def welch_ttest(x, y) -> TTestResult:
    """Unequal-variance t-test with Satterthwaite degrees of freedom."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size < 2 or y.size < 2:
        raise ValueError("each group needs at least two values")
    mx, my = x.mean(), y.mean()
    vx, vy = x.var(ddof=1) / x.size, y.var(ddof=1) / y.size
    se2 = vx + vy
    if se2 == 0.0:
        if mx == my:
            return TTestResult(0.0, float(x.size + y.size - 2), 1.0)
        return TTestResult(math.copysign(math.inf, mx - my), float(x.size + y.size - 2), 0.0)
    t = (mx - my) / math.sqrt(se2)
    df = se2**2 / (vx**2 / (x.size - 1) + vy**2 / (y.size - 1))
    p = float(2.0 * sps.t.sf(abs(t), df))
    return TTestResult(float(t), float(df), min(1.0, p))


@dataclass
class ChiSquareResult:
    statistic: float
    df: int
    p: float


def chi2_test(counts) -> ChiSquareResult:
    """Pearson chi-square of independence, no continuity correction.

    Empty rows and columns are dropped; fewer than two of either leaves
    nothing to test (statistic 0, p = 1).
    """
    table = np.asarray(counts, dtype=np.float64)
    if table.ndim != 2 or np.any(table < 0):
        raise ValueError("counts must be a nonnegative 2-D table")
    table = table[table.sum(axis=1) > 0][:, table.sum(axis=0) > 0]
    if table.shape[0] < 2 or table.shape[1] < 2:
        return ChiSquareResult(0.0, 0, 1.0)
    total = table.sum()
    expected = np.outer(table.sum(axis=1), table.sum(axis=0)) / total
    stat = float(np.sum((table - expected) ** 2 / expected))
    df = (table.shape[0] - 1) * (table.shape[1] - 1)
    return ChiSquareResult(stat, df, float(sps.chi2.sf(stat, df)))
