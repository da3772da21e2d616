"""Exact path-dependent Shapley attributions for the boosted trees, and
SHAP-based feature ranking over cross-validation folds.

Every root-to-leaf path is handled on its own: the features met along the
path are merged into unique elements carrying a zero fraction (product of
cover ratios) and a one fraction (does the row follow the path there). The
Shapley weights of a leaf then follow from the usual extend/unwind
polynomial recurrences.
"""

from __future__ import annotations

import csv
import io
import math
import zlib
from dataclasses import dataclass
from itertools import combinations

import numpy as np
from numba import njit

from .folds import FoldError, derive_seed, stratified_kfold
from .gbdt import GBDTConfig, Model, Tree, fit
from .table import FeatureTable, format_real, write_text_atomic

MAX_BRUTE_FORCE_FEATURES = 10


@dataclass
class ShapVector:
    values: np.ndarray  # (n_features,) or (n_rows, n_features), margin units
    base_value: float


@dataclass
class LeafPaths:
    """Per leaf of one tree: the unique features on its path with zero fractions
    and the (node, went_left) conditions that decide the one fractions."""

    leaf: np.ndarray  # (L,) node index of the leaf
    n_elem: np.ndarray  # (L,) unique features on the path
    elem_feature: np.ndarray  # (L, D)
    elem_zero: np.ndarray  # (L, D)
    n_cond: np.ndarray  # (L,)
    cond_node: np.ndarray  # (L, D)
    cond_left: np.ndarray  # (L, D) bool
    cond_elem: np.ndarray  # (L, D) which element the condition belongs to


def leaf_paths(tree: Tree) -> LeafPaths:
    depth = max(tree.depth(), 1)
    leaves = []
    stack = [(0, [])]
    while stack:
        node, path = stack.pop()
        if tree.feature[node] < 0:
            leaves.append((node, path))
        else:
            stack.append((int(tree.right[node]), path + [(node, False)]))
            stack.append((int(tree.left[node]), path + [(node, True)]))
    leaves.sort()
    L = len(leaves)
    out = LeafPaths(
        leaf=np.array([lf for lf, _ in leaves], dtype=np.int64),
        n_elem=np.zeros(L, np.int64),
        elem_feature=np.full((L, depth), -1, np.int64),
        elem_zero=np.ones((L, depth)),
        n_cond=np.zeros(L, np.int64),
        cond_node=np.zeros((L, depth), np.int64),
        cond_left=np.zeros((L, depth), np.bool_),
        cond_elem=np.zeros((L, depth), np.int64),
    )
    for li, (_, path) in enumerate(leaves):
        slot: dict[int, int] = {}
        for c, (node, went_left) in enumerate(path):
            f = int(tree.feature[node])
            child = tree.left[node] if went_left else tree.right[node]
            if f not in slot:
                slot[f] = len(slot)
                out.elem_feature[li, slot[f]] = f
            e = slot[f]
            out.elem_zero[li, e] *= tree.cover[child] / tree.cover[node]
            out.cond_node[li, c] = node
            out.cond_left[li, c] = went_left
            out.cond_elem[li, c] = e
        out.n_elem[li] = len(slot)
        out.n_cond[li] = len(path)
    return out


@njit(cache=True, nogil=True)
def _tree_shap_rows(X, feature, threshold, missing_left, contrib, lp_leaf, n_elem, elem_feature, elem_zero, n_cond, cond_node, cond_left, cond_elem, phi):
    n_leaves = lp_leaf.size
    D = elem_feature.shape[1]
    one = np.empty(D + 1)
    zero = np.empty(D + 1)
    fid = np.empty(D + 1, np.int64)
    pw = np.empty(D + 2)
    for r in range(X.shape[0]):
        for li in range(n_leaves):
            m = n_elem[li]
            if m == 0:
                continue
            # one fractions of this row along the leaf's path
            zero[0] = 1.0
            one[0] = 1.0
            fid[0] = -1
            for e in range(m):
                zero[e + 1] = elem_zero[li, e]
                one[e + 1] = 1.0
                fid[e + 1] = elem_feature[li, e]
            for c in range(n_cond[li]):
                node = cond_node[li, c]
                x = X[r, feature[node]]
                if np.isnan(x):
                    goes_left = missing_left[node]
                else:
                    goes_left = x < threshold[node]
                if goes_left != cond_left[li, c]:
                    one[cond_elem[li, c] + 1] = 0.0
            # extend the path polynomial with elements 0..m
            for l in range(m + 1):
                pw[l] = 1.0 if l == 0 else 0.0
                for i in range(l - 1, -1, -1):
                    pw[i + 1] += one[l] * pw[i] * (i + 1) / (l + 1)
                    pw[i] = zero[l] * pw[i] * (l - i) / (l + 1)
            v = contrib[lp_leaf[li]]
            ud = m  # index of the last element
            for e in range(1, m + 1):
                o = one[e]
                z = zero[e]
                total = 0.0
                if o != 0.0:
                    nxt = pw[ud]
                    for j in range(ud - 1, -1, -1):
                        tmp = nxt * (ud + 1) / ((j + 1) * o)
                        total += tmp
                        nxt = pw[j] - tmp * z * (ud - j) / (ud + 1)
                elif z != 0.0:
                    for j in range(ud - 1, -1, -1):
                        total += pw[j] / (z * (ud - j) / (ud + 1))
                phi[r, fid[e]] += total * (o - z) * v


def tree_expected_value(tree: Tree, contrib: np.ndarray) -> float:
    leaves = tree.leaves()
    return math.fsum(contrib[leaves] * tree.cover[leaves]) / tree.cover[0]


def tree_shap_single(tree: Tree, X: np.ndarray, n_features: int, contrib: np.ndarray | None = None) -> np.ndarray:
    X = np.ascontiguousarray(np.atleast_2d(np.asarray(X, dtype=np.float64)))
    contrib = tree.value if contrib is None else contrib
    lp = leaf_paths(tree)
    phi = np.zeros((X.shape[0], n_features))
    _tree_shap_rows(
        X, tree.feature, tree.threshold, tree.missing_left, contrib,
        lp.leaf, lp.n_elem, lp.elem_feature, lp.elem_zero, lp.n_cond, lp.cond_node, lp.cond_left, lp.cond_elem, phi,
    )
    return phi


def tree_shap(model: Model, rows) -> ShapVector:
    """Attributions summed over trees; ``base_value`` is the cover-weighted expected margin."""
    X = model._matrix(rows)
    F = len(model.feature_names)
    phi = np.zeros((X.shape[0], F))
    base = model.base_margin
    for k, tree in enumerate(model.trees):
        contrib = model.tree_contributions(k)
        phi += tree_shap_single(tree, X, F, contrib)
        base += tree_expected_value(tree, contrib)
    if np.ndim(rows) == 1:
        phi = phi[0]
    return ShapVector(phi, base)


# -- brute-force oracle ----------------------------------------------------------


def _conditional_expectation(tree: Tree, X: np.ndarray, subset: frozenset, values: np.ndarray, node: int = 0) -> np.ndarray:
    f = int(tree.feature[node])
    if f < 0:
        return np.full(X.shape[0], float(values[node]))
    lc, rc = int(tree.left[node]), int(tree.right[node])
    el = _conditional_expectation(tree, X, subset, values, lc)
    er = _conditional_expectation(tree, X, subset, values, rc)
    if f in subset:
        x = X[:, f]
        goes_left = np.where(np.isnan(x), bool(tree.missing_left[node]), x < tree.threshold[node])
        return np.where(goes_left, el, er)
    return (tree.cover[lc] * el + tree.cover[rc] * er) / tree.cover[node]


def brute_force_shap(tree: Tree, rows, n_features: int | None = None, values: np.ndarray | None = None) -> ShapVector:
    """Shapley values by enumerating every subset of the tree's used features."""
    X = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    values = tree.value if values is None else values
    used = tree.used_features()
    if len(used) > MAX_BRUTE_FORCE_FEATURES:
        raise ValueError(f"tree uses {len(used)} features; brute force supports at most {MAX_BRUTE_FORCE_FEATURES}")
    n_features = X.shape[1] if n_features is None else n_features
    M = len(used)
    cache = {}
    for size in range(M + 1):
        for combo in combinations(used, size):
            s = frozenset(combo)
            cache[s] = _conditional_expectation(tree, X, s, values)
    phi = np.zeros((X.shape[0], n_features))
    for i in used:
        others = [f for f in used if f != i]
        for size in range(M):
            weight = math.factorial(size) * math.factorial(M - size - 1) / math.factorial(M)
            for combo in combinations(others, size):
                s = frozenset(combo)
                phi[:, i] += weight * (cache[s | {i}] - cache[s])
    base = float(cache[frozenset()][0]) if X.shape[0] else 0.0
    if np.ndim(rows) == 1:
        phi = phi[0]
    return ShapVector(phi, base)


# -- feature ranking ---------------------------------------------------------------


@dataclass
class ImportanceRanking:
    names: list[str]  # descending by score, ties by name
    scores: dict[str, float]
    selected: list[str]
    fold_scores: list[np.ndarray]  # per-fold mean |SHAP| aligned with the input columns

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["feature", "mean_abs_shap", "rank", "selected"])
        chosen = set(self.selected)
        for rank, name in enumerate(self.names, start=1):
            w.writerow([name, format_real(self.scores[name]), rank, int(name in chosen)])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        write_text_atomic(path, self.to_csv_text())


def rank_features(column_names, scores: np.ndarray, top_k: int) -> ImportanceRanking:
    score_map = {c: float(s) for c, s in zip(column_names, scores)}
    order = sorted(column_names, key=lambda c: (-score_map[c], c))
    return ImportanceRanking(order, score_map, order[: max(0, top_k)], [])


def canonical_order(table: FeatureTable, idx: np.ndarray) -> np.ndarray:
    """Rows of ``idx`` sorted by patient id, so results do not depend on file row order."""
    idx = np.asarray(idx, dtype=np.int64)
    return idx[np.argsort(np.array([table.patient_ids[i] for i in idx]), kind="stable")]


def fit_with_early_stopping(table: FeatureTable, train_idx: np.ndarray, config: GBDTConfig, seed: int) -> Model:
    """Train on ``train_idx``; when early stopping is on, one stratified fifth of it is held out for it."""
    train_idx = canonical_order(table, train_idx)
    cfg = GBDTConfig.from_dict({**config.to_dict(), "seed": seed})
    if not config.early_stopping:
        return fit(table.rows(train_idx), None, cfg)
    inner = stratified_kfold(table.labels[train_idx], 5, derive_seed(seed, 1))
    es_rows = train_idx[inner.folds[0]]
    fit_rows = train_idx[inner.train_indices(0)]
    return fit(table.rows(fit_rows), table.rows(es_rows), cfg)


def mean_abs_shap(model: Model, rows: FeatureTable) -> np.ndarray:
    sv = tree_shap(model, rows)
    return np.abs(np.atleast_2d(sv.values)).mean(axis=0)


def select_features_cv(
    table: FeatureTable,
    config: GBDTConfig,
    k_folds: int = 5,
    top_k: int = 14,
    *,
    seed: int | None = None,
    folds: list | None = None,
) -> ImportanceRanking:
    """Rank features by mean |SHAP| on the validation rows of each fold.

    ``folds`` may give the validation patient ids of each fold; otherwise a
    stratified plan is drawn from ``seed`` (default: ``config.seed``).
    """
    seed = config.seed if seed is None else seed
    if folds is None:
        try:
            plan = stratified_kfold(table.labels, k_folds, derive_seed(seed, 0))
        except FoldError as exc:
            raise FoldError(f"degenerate folds: {exc}") from exc
        fold_rows = plan.folds
    else:
        pos = {p: i for i, p in enumerate(table.patient_ids)}
        fold_rows = [np.sort(np.array([pos[p] for p in ids], dtype=np.int64)) for ids in folds]
    n = table.n_rows
    # visit folds by their sorted patient ids and seed each from its content,
    # so neither row order nor fold enumeration order matters
    keyed = sorted((sorted(table.patient_ids[i] for i in idx), idx) for idx in fold_rows)
    per_fold = []
    for f, (ids, valid_idx) in enumerate(keyed):
        mask = np.ones(n, bool)
        mask[valid_idx] = False
        train_idx = np.flatnonzero(mask)
        for idx in (train_idx, valid_idx):
            if np.unique(table.labels[idx]).size < 2:
                raise FoldError(f"degenerate folds: fold {f} lacks a class")
        fold_key = zlib.crc32("\n".join(ids).encode())
        model = fit_with_early_stopping(table, train_idx, config, derive_seed(seed, 2, fold_key))
        per_fold.append(mean_abs_shap(model, table.rows(canonical_order(table, valid_idx))))
    scores = np.mean(per_fold, axis=0)
    ranking = rank_features(table.column_names, scores, top_k)
    ranking.fold_scores = per_fold
    return ranking
