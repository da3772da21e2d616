"""Moments of integer HU samples computed from exact integer power sums.

Central moments come out of Python-int arithmetic, so they are identical
under any voxel ordering and under integer shifts of the samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np


@dataclass(frozen=True)
class HUMoments:
    n: int
    minimum: float
    maximum: float
    mean: float
    variance: float  # population (divide by n)
    skewness: float
    kurtosis: float  # uncorrected; normal -> 3

    @property
    def sd(self) -> float:
        return math.sqrt(self.variance)


EMPTY = HUMoments(0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


def hu_moments(values) -> HUMoments:
    """Min/max/mean and standardized moments; zero variance gives skew = kurt = 0."""
    v = np.asarray(values, dtype=np.int64).ravel()
    n = int(v.size)
    if n == 0:
        return EMPTY
    s1 = int(v.sum())
    s2 = int((v * v).sum())
    s3 = int((v * v * v).sum())
    peak = int(np.abs(v).max())
    if peak**4 * n < 2**62:
        s4 = int((v**4).sum())
    else:
        s4 = int((v.astype(object) ** 4).sum())
    m2 = Fraction(n * s2 - s1 * s1, n * n)
    m3 = Fraction(n * n * s3 - 3 * n * s1 * s2 + 2 * s1**3, n**3)
    m4 = Fraction(n**3 * s4 - 4 * n * n * s1 * s3 + 6 * n * s1 * s1 * s2 - 3 * s1**4, n**4)
    if m2 == 0:
        skew = kurt = 0.0
    else:
        skew = float(m3) / float(m2) ** 1.5
        kurt = float(m4 / (m2 * m2))
    return HUMoments(
        n=n,
        minimum=float(v.min()),
        maximum=float(v.max()),
        mean=float(Fraction(s1, n)),
        variance=float(m2),
        skewness=skew,
        kurtosis=kurt,
    )


def shannon_entropy_bits(counts) -> float:
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        return 0.0
    p = counts[counts > 0] / total
    return float(max(0.0, -(p * np.log2(p)).sum()))
