from __future__ import annotations

import numpy as np

from cadomics.volume import MaskVolume, Volume


def scene(hu, spacing=(1.0, 1.0, 3.0), heart=None, territory=None):
    """Volume plus heart and territory masks for a (z, y, x) HU array."""
    hu = np.asarray(hu)
    vol = Volume.from_array(hu, spacing=spacing)
    heart_arr = np.ones(hu.shape, np.uint8) if heart is None else np.asarray(heart, np.uint8)
    terr_arr = np.full(hu.shape, 2, np.uint8) if territory is None else np.asarray(territory, np.uint8)
    terr_arr = np.where(heart_arr > 0, terr_arr, 0)
    return (
        vol,
        MaskVolume.from_array(heart_arr, vol.geometry, "binary"),
        MaskVolume.from_array(terr_arr, vol.geometry, "territory"),
    )


def random_tree(rng, n_features: int, max_depth: int, missing_prob: float = 0.0):
    """Random binary tree with positive integer covers that add up at every split."""
    from cadomics.gbdt import Tree

    feature, threshold, mleft, left, right, value, cover = [], [], [], [], [], [], []

    def new(c):
        for arr, v in ((feature, -1), (threshold, np.nan), (mleft, False), (left, -1), (right, -1), (value, rng.normal()), (cover, c)):
            arr.append(v)
        return len(feature) - 1

    root = new(float(rng.integers(20, 200)))
    frontier = [(root, 0)]
    while frontier:
        node, d = frontier.pop(0)
        c = cover[node]
        if d >= max_depth or c < 2 or (d > 0 and rng.random() < 0.25):
            continue
        k = float(rng.integers(1, int(c)))
        feature[node] = int(rng.integers(0, n_features))
        threshold[node] = float(rng.normal())
        mleft[node] = bool(rng.random() < 0.5)
        left[node] = new(k)
        right[node] = new(c - k)
        frontier += [(left[node], d + 1), (right[node], d + 1)]
    arr = lambda a, t: np.asarray(a, dtype=t)
    z = np.zeros(len(feature))
    return Tree(arr(feature, np.int64), arr(threshold, float), arr(mleft, bool), arr(left, np.int64), arr(right, np.int64), arr(value, float), arr(cover, float), z, z.copy())


def random_rows(rng, n: int, n_features: int, missing_prob: float = 0.0):
    X = rng.normal(size=(n, n_features))
    if missing_prob:
        X[rng.random(X.shape) < missing_prob] = np.nan
    return X
