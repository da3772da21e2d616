from __future__ import annotations

import numpy as np
import pytest

from cadomics import registry
from cadomics.gbdt import GBDTConfig, Model, Tree, fit
from cadomics.phantom import CohortSpec, generate_cohort
from cadomics.shap import (
    ImportanceRanking,
    brute_force_shap,
    select_features_cv,
    tree_expected_value,
    tree_shap,
    tree_shap_single,
)

from helpers import random_rows, random_tree


def model_of(trees, n_features, lr=1.0, base=0.25):
    return Model(base, lr, trees, [f"f{i}" for i in range(n_features)], GBDTConfig(iterations=len(trees), depth=6), len(trees))


def stump(feature=1, threshold=0.0, lv=-1.0, rv=2.0, lc=30.0, rc=10.0):
    f = lambda *a: np.array(a)
    return Tree(f(feature, -1, -1), f(threshold, np.nan, np.nan), f(False, False, False), f(1, -1, -1), f(2, -1, -1),
                f(0.0, lv, rv), f(lc + rc, lc, rc), np.zeros(3), np.zeros(3))


def test_stump_closed_form():
    t = stump()
    m = model_of([t], 3)
    expected = (30 * -1.0 + 10 * 2.0) / 40
    sv = tree_shap(m, np.array([[5.0, -1.0, 9.0], [0.0, 1.0, 0.0]]))
    assert np.allclose(sv.values[:, [0, 2]], 0.0)
    assert sv.values[0, 1] == pytest.approx(-1.0 - expected, abs=1e-15)
    assert sv.values[1, 1] == pytest.approx(2.0 - expected, abs=1e-15)
    assert sv.base_value == pytest.approx(0.25 + expected)


def test_zero_trees():
    sv = tree_shap(model_of([], 4, base=-0.7), np.ones((3, 4)))
    assert np.all(sv.values == 0.0) and sv.base_value == -0.7


@pytest.mark.parametrize("seed", range(25))
def test_matches_brute_force_on_random_trees(seed):
    rng = np.random.default_rng(seed)
    tree = random_tree(rng, 4, 4)
    X = random_rows(rng, 200, 4, missing_prob=0.1)
    fast = tree_shap_single(tree, X, 4)
    slow = brute_force_shap(tree, X, 4)
    assert np.max(np.abs(fast - slow.values)) < 1e-9
    assert slow.base_value == pytest.approx(tree_expected_value(tree, tree.value), abs=1e-12)


def test_depth_one_matches_exactly():
    tree = stump(feature=0)
    X = np.array([[-1.0, 0.0], [1.0, 0.0]])
    assert np.array_equal(tree_shap_single(tree, X, 2), brute_force_shap(tree, X, 2).values)


def test_brute_force_feature_limit():
    rng = np.random.default_rng(0)
    tree = None
    for _ in range(200):
        t = random_tree(rng, 40, 6)
        if len(t.used_features()) > 10:
            tree = t
            break
    assert tree is not None
    with pytest.raises(ValueError):
        brute_force_shap(tree, np.zeros((1, 40)))


def test_symmetric_features_share_credit():
    f = lambda *a: np.array(a)
    # split on feature 0 then feature 1 on both sides; leaf value is the count of "high" features
    tree = Tree(
        f(0, 1, 1, -1, -1, -1, -1), f(0.0, 0.0, 0.0, np.nan, np.nan, np.nan, np.nan), np.zeros(7, bool),
        f(1, 3, 5, -1, -1, -1, -1), f(2, 4, 6, -1, -1, -1, -1),
        f(0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 2.0), f(40.0, 20.0, 20.0, 10.0, 10.0, 10.0, 10.0), np.zeros(7), np.zeros(7),
    )
    phi = tree_shap_single(tree, np.array([[1.0, 1.0], [-1.0, -1.0]]), 2)
    assert phi[0, 0] == phi[0, 1] and phi[1, 0] == phi[1, 1]


def trained_model(seed=0):
    t = generate_cohort(CohortSpec(n_rows=300, n_features=8, seed=seed, missing_rate=0.05))
    return t, fit(t, None, GBDTConfig(iterations=25, depth=4, learning_rate=0.2, early_stopping=False))


def test_local_accuracy_on_trained_model():
    t, m = trained_model()
    sv = tree_shap(m, t)
    assert np.max(np.abs(sv.base_value + sv.values.sum(axis=1) - m.predict_margin(t))) < 1e-9


def test_trained_trees_match_brute_force():
    t, m = trained_model(1)
    for k, tree in enumerate(m.trees):
        contrib = m.tree_contributions(k)
        assert np.max(np.abs(tree_shap_single(tree, t.X, 8, contrib) - brute_force_shap(tree, t.X, 8, contrib).values)) < 1e-9


def test_unused_feature_gets_exact_zero():
    t, m = trained_model(2)
    used = set().union(*(tr.used_features() for tr in m.trees))
    unused = [j for j in range(8) if j not in used]
    X = t.X.copy()
    X[:, 7] = 0.0
    m.trees = [tr for tr in m.trees if 7 not in tr.used_features()]
    sv = tree_shap(m, X)
    assert np.all(sv.values[:, 7] == 0.0)
    for j in unused:
        assert np.all(sv.values[:, j] == 0.0)


def test_two_tree_additivity():
    rng = np.random.default_rng(3)
    a, b = random_tree(rng, 5, 3), random_tree(rng, 5, 3)
    X = random_rows(rng, 50, 5)
    both = tree_shap(model_of([a, b], 5), X).values
    assert np.array_equal(both, tree_shap_single(a, X, 5) + tree_shap_single(b, X, 5))


def test_selection_finds_planted_features():
    t = generate_cohort(CohortSpec(n_rows=600, n_features=12, informative={2: 3.0, 5: -2.5, 9: 2.0}, seed=4))
    r = select_features_cv(t, GBDTConfig(iterations=150, learning_rate=0.05), top_k=3)
    assert set(r.selected) == {"f002", "f005", "f009"}
    planted = min(r.scores[c] for c in ("f002", "f005", "f009"))
    assert all(r.scores[c] < planted for c in t.column_names if c not in r.selected)
    assert all(s >= 0 for s in r.scores.values())
    assert r.names == sorted(r.names, key=lambda c: (-r.scores[c], c))


def test_ranking_invariant_to_row_order():
    t = generate_cohort(CohortSpec(n_rows=200, n_features=6, seed=5))
    cfg = GBDTConfig(iterations=30, learning_rate=0.1)
    from cadomics.folds import stratified_kfold

    plan = stratified_kfold(t.labels, 5, 9)
    folds = [[t.patient_ids[i] for i in f] for f in plan.folds]
    a = select_features_cv(t, cfg, top_k=3, folds=folds)
    perm = np.random.default_rng(1).permutation(t.n_rows)
    b = select_features_cv(t.rows(perm), cfg, top_k=3, folds=folds[::-1])
    assert a.scores == b.scores and a.names == b.names


def test_top_k_on_full_layout():
    cols = registry.full_layout()
    t = generate_cohort(CohortSpec(n_rows=150, n_features=424, informative={0: 2.0}, column_names=cols, seed=1))
    r = select_features_cv(t, GBDTConfig(iterations=10, learning_rate=0.1), top_k=14)
    assert len(r.selected) == 14
    lines = r.to_csv_text().splitlines()
    assert lines[0] == "feature,mean_abs_shap,rank,selected" and len(lines) == 425
    assert sum(int(ln.rsplit(",", 1)[1]) for ln in lines[1:]) == 14
