"""Stratified fold plans and counter-based seed derivation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class FoldError(ValueError):
    pass


def derive_seed(master: int, *counters: int) -> int:
    """Child seed from a master seed and a tuple of counters (order-free of scheduling)."""
    ss = np.random.SeedSequence([int(master) & 0xFFFFFFFF, *[int(c) for c in counters]])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


@dataclass
class FoldPlan:
    repeat: int
    seed: int
    folds: list[np.ndarray]  # row indices (sorted) of each validation fold

    @property
    def k(self) -> int:
        return len(self.folds)

    def train_indices(self, fold: int) -> np.ndarray:
        return np.sort(np.concatenate([f for i, f in enumerate(self.folds) if i != fold]))

    def assignment(self, n_rows: int) -> np.ndarray:
        out = np.full(n_rows, -1, dtype=np.int64)
        for i, f in enumerate(self.folds):
            out[f] = i
        return out


def stratified_kfold(labels, k: int, seed: int, repeat: int = 0) -> FoldPlan:
    """Shuffle each class separately, then deal its rows round-robin over the folds.

    Positives start at fold 0; negatives continue where the positives stopped so
    fold sizes differ by at most one.
    """
    labels = np.asarray(labels)
    if k < 2:
        raise FoldError("k must be >= 2")
    rng = np.random.default_rng(seed)
    assignment = np.empty(labels.size, dtype=np.int64)
    offset = 0
    for cls in (1, 0):
        idx = np.flatnonzero(labels == cls)
        if idx.size < k:
            raise FoldError(f"class {cls} has {idx.size} rows, fewer than k={k}")
        idx = idx[rng.permutation(idx.size)]
        assignment[idx] = (np.arange(idx.size) + offset) % k
        offset = (offset + idx.size) % k
    return FoldPlan(repeat, seed, [np.flatnonzero(assignment == f) for f in range(k)])
