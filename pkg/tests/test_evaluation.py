from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cadomics.evaluation import (
    SingleClassError,
    auprc,
    auroc,
    confusion_and_metrics,
    evaluate_fold,
    pr_curve,
    repeated_cv,
    roc_curve,
    trapezoid_area,
)
from cadomics.folds import FoldError, stratified_kfold
from cadomics.gbdt import GBDTConfig
from cadomics.phantom import CohortSpec, generate_cohort
from cadomics.table import FeatureTable

FAST = GBDTConfig(iterations=40, learning_rate=0.1)


def pairwise_auc(scores, labels):
    """Reference: fraction of positive/negative pairs ordered correctly, ties one half."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return total / (len(pos) * len(neg))


def test_kfold_examples():
    labels = np.array([1] * 5 + [0] * 5)
    plan = stratified_kfold(labels, 5, 0)
    assert all(sorted(labels[f].tolist()) == [0, 1] for f in plan.folds)
    again = stratified_kfold(labels, 5, 0)
    assert all(np.array_equal(a, b) for a, b in zip(plan.folds, again.folds))
    big = np.array([1] * 334 + [0] * 990)
    plan = stratified_kfold(big, 5, 3)
    assert sorted({int(big[f].sum()) for f in plan.folds}) == [66, 67]


@given(st.integers(5, 60), st.integers(5, 60), st.integers(2, 5), st.integers(0, 2**32 - 1))
def test_kfold_partition_and_balance(n_pos, n_neg, k, seed):
    labels = np.array([1] * n_pos + [0] * n_neg)
    plan = stratified_kfold(labels, k, seed)
    allrows = np.sort(np.concatenate(plan.folds))
    assert np.array_equal(allrows, np.arange(labels.size))
    for f in plan.folds:
        assert abs(labels[f].sum() - n_pos * f.size / labels.size) <= 1.0 + 1e-9
    sizes = [f.size for f in plan.folds]
    assert max(sizes) - min(sizes) <= 1


def test_kfold_too_few():
    with pytest.raises(FoldError):
        stratified_kfold([1, 1, 0, 0, 0, 0], 3, 0)


def test_confusion_examples():
    _, sens, spec, acc, f1 = confusion_and_metrics([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0])
    assert (sens, spec, acc, f1) == (1.0, 1.0, 1.0, 1.0)
    scores = [0.9] * 10 + [0.1] * 5
    c, sens, *_ = confusion_and_metrics(scores, [1] * 15)
    assert (c.tp, c.fn) == (10, 5) and sens == pytest.approx(0.6667, abs=1e-4)
    _, sens, spec, acc, f1 = confusion_and_metrics([0.1] * 4, [1, 0, 1, 0])
    assert (sens, spec, f1) == (0.0, 1.0, 0.0)
    c, sens, spec, acc, f1 = confusion_and_metrics([0.9, 0.8], [0, 0])
    assert sens is None and spec == 0.0 and c.total == 2
    with pytest.raises(ValueError):
        confusion_and_metrics([0.1], [1, 0])


def test_auroc_examples():
    assert auroc([0.9, 0.8, 0.3, 0.1], [1, 1, 0, 0]) == 1.0
    assert auroc([0.9, 0.3, 0.8, 0.1], [1, 1, 0, 0]) == 0.75
    assert auroc([0.5] * 6, [1, 0, 1, 0, 0, 1]) == 0.5
    with pytest.raises(SingleClassError):
        auroc([0.1, 0.2], [1, 1])


def test_ap_examples():
    assert auprc([0.9, 0.8, 0.3, 0.1], [1, 1, 0, 0]) == 1.0
    assert auprc([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0]) == pytest.approx(0.8333, abs=1e-4)
    with pytest.raises(SingleClassError):
        auprc([0.1, 0.2], [0, 0])


def test_ap_constant_scores_give_prevalence():
    rng = np.random.default_rng(0)
    vals = [auprc(np.full(400, 0.3), (rng.random(400) < 0.25).astype(int)) for _ in range(50)]
    assert np.mean(vals) == pytest.approx(0.25, abs=0.01)


labelled = st.integers(2, 40).flatmap(
    lambda n: st.tuples(
        st.lists(st.integers(0, 8).map(lambda v: v / 8), min_size=n, max_size=n),
        st.lists(st.integers(0, 1), min_size=n, max_size=n).filter(lambda ys: 0 < sum(ys) < len(ys)),
    )
)


@given(labelled)
def test_auroc_rank_equals_pairs_and_trapezoid(data):
    scores, labels = data
    a = auroc(scores, labels)
    assert a == pytest.approx(pairwise_auc(scores, labels), abs=1e-12)
    assert abs(trapezoid_area(roc_curve(scores, labels)) - a) <= 1e-12


@given(labelled)
def test_sensitivity_and_specificity_are_step_monotone(data):
    scores, labels = data
    thresholds = sorted(set(scores))
    sens = [confusion_and_metrics(scores, labels, t)[1] for t in thresholds]
    spec = [confusion_and_metrics(scores, labels, t)[2] for t in thresholds]
    assert all(b <= a for a, b in zip(sens, sens[1:]))
    assert all(b >= a for a, b in zip(spec, spec[1:]))


@given(labelled)
def test_pr_curve_recall_nondecreasing(data):
    scores, labels = data
    pts = pr_curve(scores, labels)
    assert all(b[1] >= a[1] for a, b in zip(pts, pts[1:])) and pts[-1][1] == 1.0
    assert 0.0 <= auprc(scores, labels) <= 1.0 + 1e-12


def test_repeated_cv_deterministic_and_bounded():
    t = generate_cohort(CohortSpec(n_rows=200, n_features=6, seed=1))
    a = repeated_cv(t, FAST, repeats=2, master_seed=7)
    b = repeated_cv(t, FAST, repeats=2, master_seed=7, threads=4)
    assert a.to_dict() == b.to_dict()
    assert np.array_equal(a.mean_scores(), b.mean_scores())
    for r in a.repeats:
        for v in r.metrics.values():
            assert 0.0 <= v <= 1.0
    for agg in a.aggregate.values():
        assert agg["sd"] >= 0


def test_repeated_cv_separable():
    t = generate_cohort(CohortSpec(n_rows=400, n_features=5, informative={0: 10.0}, seed=3))
    rep = repeated_cv(t, GBDTConfig(iterations=100, learning_rate=0.1), repeats=3)
    assert rep.aggregate["auroc"]["mean"] >= 0.95 and rep.aggregate["auroc"]["sd"] <= 0.05


def test_repeated_cv_rejects_zero_repeats():
    t = generate_cohort(CohortSpec(n_rows=50, n_features=3, seed=1))
    with pytest.raises(ValueError):
        repeated_cv(t, FAST, repeats=0)


def test_validation_only_leak_is_not_selected():
    t = generate_cohort(CohortSpec(n_rows=300, n_features=8, informative={0: 2.0}, seed=2))
    plan = stratified_kfold(t.labels, 5, 0)
    train_idx, valid_idx = plan.train_indices(0), plan.folds[0]
    X = t.X.copy()
    leak = np.random.default_rng(0).normal(size=t.n_rows)
    leak[valid_idx] = t.labels[valid_idx] * 10.0  # perfect only on held-out rows
    X = np.column_stack([X, leak])
    table = FeatureTable([*t.column_names, "leak"], t.patient_ids, t.labels, X)
    res = evaluate_fold(table, train_idx, valid_idx, FAST, seed=1, top_k=2)
    assert "leak" not in res.selected
    # the held-out rows influence nothing: rewriting them leaves the selection unchanged
    X2 = X.copy()
    X2[valid_idx] = 0.0
    table2 = FeatureTable(table.column_names, t.patient_ids, t.labels, X2)
    assert evaluate_fold(table2, train_idx, valid_idx, FAST, seed=1, top_k=2).selected == res.selected
