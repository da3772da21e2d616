"""Gradient-boosted binary trees on the weighted logistic loss.

Trees are grown level-wise on quantile-binned features with second-order
(Newton) split gains. Leaves keep the raw Newton step ``-G / (H + lambda)``;
a tree contributes ``learning_rate * leaf`` to the margin.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from numba import njit

from .table import FeatureTable

MODEL_FORMAT = "cadomics-gbdt"
MODEL_VERSION = 1
MIN_CHILD_HESSIAN = 1e-3


class TrainingDataError(ValueError):
    pass


class ModelSchemaError(ValueError):
    pass


class ModelVersionError(ModelSchemaError):
    pass


class ArityError(ValueError):
    pass


@dataclass
class GBDTConfig:
    iterations: int = 300
    learning_rate: float = 0.01
    depth: int = 6
    l2_leaf_reg: float = 5.0
    feature_subsample: float = 0.75
    border_count: int = 64
    row_subsample: float = 0.6
    class_weighting: str = "auto"  # "auto" or "none"
    early_stopping: bool = True
    seed: int = 0
    threads: int = 10

    def __post_init__(self):
        for name in ("feature_subsample", "row_subsample"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.depth < 1 or self.depth > 16:
            raise ValueError("depth must lie in 1..16")
        if not 1 <= self.border_count <= 255:
            raise ValueError("border_count must lie in 1..255")
        if self.learning_rate <= 0 or self.l2_leaf_reg < 0:
            raise ValueError("learning_rate must be > 0 and l2_leaf_reg >= 0")
        if self.class_weighting not in ("auto", "none"):
            raise ValueError("class_weighting must be 'auto' or 'none'")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")

    @classmethod
    def from_dict(cls, data: dict) -> GBDTConfig:
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown model settings: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


# -- binning ------------------------------------------------------------------


def feature_boundaries(values: np.ndarray, border_count: int) -> np.ndarray:
    """Bin boundaries for one feature (missing values ignored).

    Few distinct values: midpoints between neighbours. Otherwise quantile
    positions ``k*n/B`` of the sorted sample, each turned into the midpoint
    between the value there and the next distinct value.
    """
    x = np.sort(values[~np.isnan(values)])
    if x.size == 0:
        return np.zeros(0)
    distinct = np.unique(x)
    if distinct.size <= border_count:
        return (distinct[:-1] + distinct[1:]) / 2.0
    n = x.size
    out = []
    for k in range(1, border_count):
        idx = (k * n) // border_count
        lo = x[idx - 1]
        hi = x[idx]
        if lo == hi:
            pos = np.searchsorted(distinct, hi, side="right")
            if pos >= distinct.size:
                continue
            lo, hi = hi, distinct[pos]
        b = (lo + hi) / 2.0
        if not out or b > out[-1]:
            out.append(b)
    return np.asarray(out, dtype=np.float64)


@dataclass
class BinMapper:
    border_count: int
    boundaries: list[np.ndarray]

    @property
    def missing_bin(self) -> int:
        return self.border_count

    def n_bins(self) -> np.ndarray:
        return np.array([b.size + 1 for b in self.boundaries], dtype=np.int64)

    def transform(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != len(self.boundaries):
            raise ArityError(f"expected {len(self.boundaries)} columns")
        out = np.empty(X.shape, dtype=np.uint8)
        for j, b in enumerate(self.boundaries):
            col = X[:, j]
            bins = np.searchsorted(b, col, side="right")
            bins[np.isnan(col)] = self.missing_bin
            out[:, j] = bins
        return out


def bin_features(table: FeatureTable | np.ndarray, border_count: int) -> BinMapper:
    X = table.X if isinstance(table, FeatureTable) else np.asarray(table, dtype=np.float64)
    if X.shape[0] == 0:
        raise TrainingDataError("cannot bin an empty table")
    return BinMapper(border_count, [feature_boundaries(X[:, j], border_count) for j in range(X.shape[1])])


# -- trees --------------------------------------------------------------------


@dataclass
class Tree:
    """Array-encoded binary tree; node 0 is the root, ``feature == -1`` marks a leaf.

    Rows go left iff ``x < threshold``; a missing value goes left iff ``missing_left``.
    """

    feature: np.ndarray  # int64
    threshold: np.ndarray  # float64
    missing_left: np.ndarray  # bool
    left: np.ndarray  # int64
    right: np.ndarray  # int64
    value: np.ndarray  # float64, raw Newton value (leaves)
    cover: np.ndarray  # float64, number of sampled training rows reaching the node
    sum_grad: np.ndarray
    sum_hess: np.ndarray

    @property
    def n_nodes(self) -> int:
        return int(self.feature.size)

    def depth(self) -> int:
        best = 0
        stack = [(0, 0)]
        while stack:
            node, d = stack.pop()
            if self.feature[node] < 0:
                best = max(best, d)
            else:
                stack.append((int(self.left[node]), d + 1))
                stack.append((int(self.right[node]), d + 1))
        return best

    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.feature < 0)

    def used_features(self) -> list[int]:
        return sorted({int(f) for f in self.feature if f >= 0})


@njit(cache=True, nogil=True)
def _grow(bins, g, h, rows, features, n_bins, missing_bin, depth, lam, min_child_h):
    max_nodes = 2 ** (depth + 1) - 1
    feat = np.full(max_nodes, -1, np.int64)
    tbin = np.full(max_nodes, -1, np.int64)
    mleft = np.zeros(max_nodes, np.bool_)
    left = np.full(max_nodes, -1, np.int64)
    right = np.full(max_nodes, -1, np.int64)
    value = np.zeros(max_nodes, np.float64)
    cover = np.zeros(max_nodes, np.float64)
    sg = np.zeros(max_nodes, np.float64)
    sh = np.zeros(max_nodes, np.float64)
    start = np.zeros(max_nodes, np.int64)
    stop = np.zeros(max_nodes, np.int64)
    node_depth = np.zeros(max_nodes, np.int64)

    order = rows.copy()
    buf = np.empty_like(order)
    n_nodes = 1
    start[0] = 0
    stop[0] = order.size
    hist_g = np.zeros(missing_bin + 1, np.float64)
    hist_h = np.zeros(missing_bin + 1, np.float64)

    node = 0
    while node < n_nodes:
        G = 0.0
        H = 0.0
        for i in range(start[node], stop[node]):
            r = order[i]
            G += g[r]
            H += h[r]
        sg[node] = G
        sh[node] = H
        cover[node] = stop[node] - start[node]
        value[node] = -G / (H + lam)
        if node_depth[node] >= depth:
            node += 1
            continue
        parent_score = G * G / (H + lam)
        best_gain = 0.0
        best_f = -1
        best_t = -1
        best_ml = False
        for fi in range(features.size):
            f = features[fi]
            nb = n_bins[f]
            for b in range(nb):
                hist_g[b] = 0.0
                hist_h[b] = 0.0
            hist_g[missing_bin] = 0.0
            hist_h[missing_bin] = 0.0
            n_missing = 0
            for i in range(start[node], stop[node]):
                r = order[i]
                b = bins[f, r]
                hist_g[b] += g[r]
                hist_h[b] += h[r]
                if b == missing_bin:
                    n_missing += 1
            gm = hist_g[missing_bin]
            hm = hist_h[missing_bin]
            gl = 0.0
            hl = 0.0
            for t in range(nb):
                gl += hist_g[t]
                hl += hist_h[t]
                for d in range(2):
                    ml = d == 0
                    if t == nb - 1:
                        # all observed values left, missing right
                        if ml or n_missing == 0:
                            continue
                    if ml:
                        GL = gl + gm
                        HL = hl + hm
                    else:
                        GL = gl
                        HL = hl
                    GR = G - GL
                    HR = H - HL
                    if HL < min_child_h or HR < min_child_h:
                        continue
                    gain = 0.5 * (GL * GL / (HL + lam) + GR * GR / (HR + lam) - parent_score)
                    if gain > best_gain:
                        best_gain = gain
                        best_f = f
                        best_t = t
                        best_ml = ml
        if best_f >= 0:
            lo = start[node]
            hi = stop[node]
            nl = 0
            for i in range(lo, hi):
                r = order[i]
                b = bins[best_f, r]
                if b == missing_bin:
                    go_left = best_ml
                else:
                    go_left = b <= best_t
                if go_left:
                    order[lo + nl] = r
                    nl += 1
                else:
                    buf[i - nl] = r
            k = lo + nl
            for i in range(lo, hi - nl):
                order[k] = buf[i]
                k += 1
            feat[node] = best_f
            tbin[node] = best_t
            mleft[node] = best_ml
            left[node] = n_nodes
            right[node] = n_nodes + 1
            start[n_nodes] = lo
            stop[n_nodes] = lo + nl
            start[n_nodes + 1] = lo + nl
            stop[n_nodes + 1] = hi
            node_depth[n_nodes] = node_depth[node] + 1
            node_depth[n_nodes + 1] = node_depth[node] + 1
            n_nodes += 2
        node += 1
    return feat[:n_nodes], tbin[:n_nodes], mleft[:n_nodes], left[:n_nodes], right[:n_nodes], value[:n_nodes], cover[:n_nodes], sg[:n_nodes], sh[:n_nodes]


@njit(cache=True, nogil=True)
def _route(X, feature, threshold, missing_left, left, right):
    out = np.empty(X.shape[0], np.int64)
    for i in range(X.shape[0]):
        node = 0
        while feature[node] >= 0:
            x = X[i, feature[node]]
            if np.isnan(x):
                go_left = missing_left[node]
            else:
                go_left = x < threshold[node]
            node = left[node] if go_left else right[node]
        out[i] = node
    return out


def route(tree: Tree, X: np.ndarray) -> np.ndarray:
    """Leaf index reached by each row."""
    return _route(X, tree.feature, tree.threshold, tree.missing_left, tree.left, tree.right)


def _sigmoid(m):
    return 1.0 / (1.0 + np.exp(-m))


# -- model ----------------------------------------------------------------------


@dataclass
class Model:
    base_margin: float
    learning_rate: float
    trees: list[Tree]
    feature_names: list[str]
    config: GBDTConfig
    best_iteration: int
    validation_logloss: list[float] = field(default_factory=list)

    def tree_contributions(self, k: int) -> np.ndarray:
        return self.learning_rate * self.trees[k].value

    def _matrix(self, X) -> np.ndarray:
        if isinstance(X, FeatureTable):
            if list(X.column_names) != list(self.feature_names):
                X = X.select(self.feature_names)
            X = X.X
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != len(self.feature_names):
            raise ArityError(f"rows have {X.shape[1]} values, model expects {len(self.feature_names)}")
        return np.ascontiguousarray(X)

    def predict_margin(self, X, n_trees: int | None = None) -> np.ndarray:
        X = self._matrix(X)
        margin = np.full(X.shape[0], self.base_margin, dtype=np.float64)
        for k in range(len(self.trees) if n_trees is None else n_trees):
            margin += self.tree_contributions(k)[route(self.trees[k], X)]
        return margin

    def predict_proba(self, X) -> np.ndarray:
        return _sigmoid(self.predict_margin(X))

    def truncated(self, k: int) -> Model:
        return Model(self.base_margin, self.learning_rate, self.trees[:k], self.feature_names, self.config, k, self.validation_logloss)


def predict_margin(model: Model, row) -> float | np.ndarray:
    out = model.predict_margin(row)
    return float(out[0]) if np.ndim(row) == 1 else out


def predict_proba(model: Model, row) -> float | np.ndarray:
    out = model.predict_proba(row)
    return float(out[0]) if np.ndim(row) == 1 else out


def class_weights(labels: np.ndarray, scheme: str) -> tuple[float, float]:
    n_pos = int(np.sum(labels == 1))
    n_neg = int(labels.size - n_pos)
    if scheme == "auto":
        return 1.0, n_neg / n_pos
    return 1.0, 1.0


def weighted_logloss(margin: np.ndarray, labels: np.ndarray, weights: np.ndarray) -> float:
    # log(1 + exp(-m)) for positives, log(1 + exp(m)) for negatives
    signed = np.where(labels == 1, -margin, margin)
    losses = np.logaddexp(0.0, signed)
    return math.fsum(weights * losses) / math.fsum(weights)


def _check_training(table: FeatureTable):
    if table.n_rows == 0:
        raise TrainingDataError("training table is empty")
    if np.unique(table.labels).size < 2:
        raise TrainingDataError("training table must contain both classes")


def fit(train: FeatureTable, valid: FeatureTable | None, config: GBDTConfig) -> Model:
    _check_training(train)
    X = np.ascontiguousarray(train.X)
    y = train.labels.astype(np.int64)
    n, F = X.shape
    w_neg, w_pos = class_weights(y, config.class_weighting)
    w = np.where(y == 1, w_pos, w_neg)
    if config.class_weighting == "auto":
        base = 0.0  # weighted prevalence is one half by construction
    else:
        base = math.log(int(y.sum()) / int(n - y.sum()))

    mapper = bin_features(X, config.border_count)
    bins = np.ascontiguousarray(mapper.transform(X).T)  # feature-major for histogram scans
    n_bins = mapper.n_bins()
    rng = np.random.default_rng(config.seed)
    n_feat = max(1, int(round(config.feature_subsample * F)))

    use_valid = valid is not None and config.early_stopping
    if use_valid:
        if list(valid.column_names) != list(train.column_names):
            valid = valid.select(train.column_names)
        Xv = np.ascontiguousarray(valid.X)
        yv = valid.labels.astype(np.int64)
        wv = np.where(yv == 1, w_pos, w_neg)
        mv = np.full(Xv.shape[0], base)

    margin = np.full(n, base)
    trees: list[Tree] = []
    history: list[float] = []
    all_rows = np.arange(n, dtype=np.int64)
    for _ in range(config.iterations):
        p = _sigmoid(margin)
        g = w * (p - y)
        h = w * p * (1.0 - p)
        if n_feat < F:
            features = np.sort(rng.choice(F, size=n_feat, replace=False)).astype(np.int64)
        else:
            features = np.arange(F, dtype=np.int64)
        if config.row_subsample < 1.0:
            rows = np.flatnonzero(rng.random(n) < config.row_subsample).astype(np.int64)
            if rows.size == 0:
                rows = all_rows
        else:
            rows = all_rows
        feat, tbin, mleft, left, right, value, cover, sg, sh = _grow(
            bins, g, h, rows, features, n_bins, mapper.missing_bin, config.depth, float(config.l2_leaf_reg), MIN_CHILD_HESSIAN
        )
        threshold = np.full(feat.size, np.nan)
        for i in np.flatnonzero(feat >= 0):
            b = mapper.boundaries[feat[i]]
            threshold[i] = b[tbin[i]] if tbin[i] < b.size else math.inf
        tree = Tree(feat, threshold, mleft, left, right, value, cover, sg, sh)
        trees.append(tree)
        contrib = config.learning_rate * tree.value
        margin += contrib[route(tree, X)]
        if use_valid:
            mv += contrib[route(tree, Xv)]
            history.append(weighted_logloss(mv, yv, wv))

    best = len(trees)
    if use_valid and history:
        best = int(np.argmin(history)) + 1
        trees = trees[:best]
    return Model(base, config.learning_rate, trees, list(train.column_names), config, best, history)


# -- serialization ---------------------------------------------------------------


def _real(x: float) -> str:
    return repr(float(x))


def serialize(model: Model) -> str:
    trees = []
    for t in model.trees:
        nodes = []
        for i in range(t.n_nodes):
            node = {"cover": _real(t.cover[i]), "sum_grad": _real(t.sum_grad[i]), "sum_hess": _real(t.sum_hess[i]), "value": _real(t.value[i])}
            if t.feature[i] >= 0:
                node.update(
                    feature=int(t.feature[i]),
                    threshold=_real(t.threshold[i]),
                    missing_left=bool(t.missing_left[i]),
                    left=int(t.left[i]),
                    right=int(t.right[i]),
                )
            nodes.append(node)
        trees.append({"depth": t.depth(), "nodes": nodes})
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "boosting": "newton, level-wise binary trees, per-tree feature subsample",
        "feature_names": list(model.feature_names),
        "config": model.config.to_dict(),
        "base_margin": _real(model.base_margin),
        "learning_rate": _real(model.learning_rate),
        "best_iteration": model.best_iteration,
        "validation_logloss": [_real(v) for v in model.validation_logloss],
        "trees": trees,
    }
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def _tree_from_doc(doc: dict, n_features: int, max_depth: int) -> Tree:
    nodes = doc["nodes"]
    m = len(nodes)
    feature = np.full(m, -1, np.int64)
    threshold = np.full(m, np.nan)
    missing_left = np.zeros(m, bool)
    left = np.full(m, -1, np.int64)
    right = np.full(m, -1, np.int64)
    value, cover, sg, sh = (np.zeros(m) for _ in range(4))
    for i, nd in enumerate(nodes):
        value[i] = float(nd["value"])
        cover[i] = float(nd["cover"])
        sg[i] = float(nd["sum_grad"])
        sh[i] = float(nd["sum_hess"])
        if "feature" in nd:
            f, lc, rc = int(nd["feature"]), int(nd["left"]), int(nd["right"])
            if not 0 <= f < n_features:
                raise ModelSchemaError(f"node {i}: feature index {f} out of range")
            if not (i < lc < m and i < rc < m):
                raise ModelSchemaError(f"node {i}: child index out of range")
            feature[i], left[i], right[i] = f, lc, rc
            threshold[i] = float(nd["threshold"])
            missing_left[i] = bool(nd["missing_left"])
    tree = Tree(feature, threshold, missing_left, left, right, value, cover, sg, sh)
    depth = int(doc["depth"])
    if depth > max_depth:
        raise ModelSchemaError(f"tree depth {depth} exceeds the configured limit {max_depth}")
    if tree.depth() != depth:
        raise ModelSchemaError(f"tree depth field {depth} disagrees with its nodes ({tree.depth()})")
    return tree


def deserialize(text: str) -> Model:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelSchemaError(f"model document is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
        raise ModelSchemaError("not a cadomics model document")
    if doc.get("version") != MODEL_VERSION:
        raise ModelVersionError(f"model document version {doc.get('version')!r} is incompatible with version {MODEL_VERSION}")
    try:
        config = GBDTConfig.from_dict(doc["config"])
        names = [str(s) for s in doc["feature_names"]]
        trees = [_tree_from_doc(t, len(names), config.depth) for t in doc["trees"]]
        model = Model(
            base_margin=float(doc["base_margin"]),
            learning_rate=float(doc["learning_rate"]),
            trees=trees,
            feature_names=names,
            config=config,
            best_iteration=int(doc["best_iteration"]),
            validation_logloss=[float(v) for v in doc.get("validation_logloss", [])],
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ModelSchemaError):
            raise
        raise ModelSchemaError(f"malformed model document: {exc}") from exc
    if model.best_iteration != len(trees):
        raise ModelSchemaError("best_iteration must equal the number of stored trees")
    return model
