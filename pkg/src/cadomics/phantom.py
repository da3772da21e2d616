"""Synthetic CT phantoms with counted ground truth, and synthetic feature cohorts.

Ground truth is obtained by counting the generated arrays with code that is
deliberately separate from the extractors, so the two can check each other.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import brentq

from . import registry
from .table import FeatureTable
from .volume import Geometry, MaskVolume, Volume

FAT_BAND_LOW = -190
FAT_BAND_HIGH = -30


class PhantomSpecError(ValueError):
    pass


@dataclass
class LesionSpec:
    center_mm: tuple[float, float, float]
    hu: int
    territory: int
    shape: str = "box"  # "box" (size_mm = full edge lengths) or "sphere" (size_mm = radius)
    size_mm: tuple[float, float, float] | float = (3.0, 3.0, 3.0)
    hu_jitter: int = 0


@dataclass
class PhantomSpec:
    dims: tuple[int, int, int] = (48, 48, 24)
    spacing: tuple[float, float, float] = (0.5, 0.5, 3.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    pericardium_center_mm: tuple[float, float, float] | None = None
    pericardium_semi_axes_mm: tuple[float, float, float] = (10.0, 10.0, 30.0)
    fat_shell_mm: float = 2.0
    # int, [q1, q2, q3, q4] per slab, or {"values": [...], "weights": [...]}
    fat_hu: object = -100
    heart_hu: int = 40
    background_hu: int = -900
    lesions: list[LesionSpec] = field(default_factory=list)
    seed: int = 0

    @classmethod
    def from_dict(cls, data: dict) -> PhantomSpec:
        data = dict(data)
        data["lesions"] = [LesionSpec(**lesion) for lesion in data.get("lesions", [])]
        for key in ("dims", "spacing", "origin", "pericardium_semi_axes_mm", "pericardium_center_mm"):
            if data.get(key) is not None:
                data[key] = tuple(data[key])
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LesionTruth:
    territory: int
    voxel_count: int
    volume_mm3: float
    hu_min: int
    hu_max: int
    hu_mean: float
    agatston: float
    detectable: bool  # survives the 1 mm^2 single-slice minimum


@dataclass
class GroundTruth:
    lesions: list[LesionTruth]
    total_agatston: float
    territory_agatston: dict[int, float]
    fat_count: int
    fat_slab_counts: list[int]
    fat_slab_band_counts: list[list[int]]
    voxel_volume_mm3: float

    @property
    def fat_volume_mL(self) -> float:
        return self.fat_count * self.voxel_volume_mm3 / 1000.0

    def band_volume_mL(self, slab: int, band_low: int) -> float:
        b = (band_low - FAT_BAND_LOW) // 20
        return self.fat_slab_band_counts[slab - 1][b] * self.voxel_volume_mm3 / 1000.0


def _grid_mm(spec: PhantomSpec):
    nx, ny, nz = spec.dims
    sx, sy, sz = spec.spacing
    ox, oy, oz = spec.origin
    z, y, x = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    return ox + x * sx, oy + y * sy, oz + z * sz


def _default_center(spec: PhantomSpec):
    nx, ny, nz = spec.dims
    sx, sy, sz = spec.spacing
    ox, oy, oz = spec.origin
    return (ox + (nx - 1) * sx / 2, oy + (ny - 1) * sy / 2, oz + (nz - 1) * sz / 2)


def _lesion_mask(lesion: LesionSpec, X, Y, Z) -> np.ndarray:
    cx, cy, cz = lesion.center_mm
    if lesion.shape == "box":
        ex, ey, ez = lesion.size_mm
        return (np.abs(X - cx) <= ex / 2) & (np.abs(Y - cy) <= ey / 2) & (np.abs(Z - cz) <= ez / 2)
    if lesion.shape == "sphere":
        r = float(lesion.size_mm)
        return (X - cx) ** 2 + (Y - cy) ** 2 + (Z - cz) ** 2 <= r * r
    raise PhantomSpecError(f"unknown lesion shape {lesion.shape!r}")


def _fat_values(spec: PhantomSpec, rng, shell: np.ndarray, slab_of_z: np.ndarray) -> np.ndarray:
    n = int(shell.sum())
    fat_hu = spec.fat_hu
    if isinstance(fat_hu, dict):
        values = np.asarray(fat_hu["values"], dtype=np.int64)
        weights = np.asarray(fat_hu.get("weights", np.ones(len(values))), dtype=np.float64)
        out = rng.choice(values, size=n, p=weights / weights.sum())
    elif isinstance(fat_hu, (list, tuple)):
        if len(fat_hu) != 4:
            raise PhantomSpecError("per-slab fat HU needs four values (Q1..Q4)")
        z = np.nonzero(shell)[0]
        out = np.asarray(fat_hu, dtype=np.int64)[slab_of_z[z] - 1]
    else:
        out = np.full(n, int(fat_hu), dtype=np.int64)
    if n and (out.min() < FAT_BAND_LOW or out.max() > FAT_BAND_HIGH):
        raise PhantomSpecError("fat HU must lie within [-190, -30]")
    return out


def _slab_of_z(pericardium: np.ndarray) -> np.ndarray:
    """Slab number 1..4 per z index (quarters of the pericardium's slice range)."""
    nz = pericardium.shape[0]
    occupied = [z for z in range(nz) if pericardium[z].any()]
    slab = np.zeros(nz, dtype=np.int64)
    if occupied:
        lo, hi = occupied[0], occupied[-1]
        span = hi - lo + 1
        for z in range(lo, hi + 1):
            slab[z] = min(4, 1 + (4 * (z - lo)) // span)
    return slab


def _agatston_truth(zs, counts_hu, spacing) -> tuple[float, bool]:
    sx, sy, sz = spacing
    by_slice: dict[int, list[int]] = {}
    for z, h in zip(zs, counts_hu):
        by_slice.setdefault(int(z), []).append(int(h))
    total = 0.0
    detectable = False
    for z in sorted(by_slice):
        area = len(by_slice[z]) * sx * sy
        if area < 1.0:
            continue
        detectable = True
        peak = max(by_slice[z])
        weight = 1 if peak < 200 else 2 if peak < 300 else 3 if peak < 400 else 4
        total += area * weight
    return (sz / 3.0) * total, detectable


def generate_phantom(spec: PhantomSpec):
    """Returns ``(volume, heart_mask, pericardium_mask, territory_mask, ground_truth)``.

    The heart mask and the pericardium mask coincide (the ellipsoid).
    """
    rng = np.random.default_rng(spec.seed)
    geometry = Geometry.make(spec.dims, spec.spacing, spec.origin)
    X, Y, Z = _grid_mm(spec)
    cx, cy, cz = spec.pericardium_center_mm or _default_center(spec)
    ax, ay, az = spec.pericardium_semi_axes_mm
    rho2 = ((X - cx) / ax) ** 2 + ((Y - cy) / ay) ** 2 + ((Z - cz) / az) ** 2
    peri = rho2 <= 1.0
    if not peri.any():
        raise PhantomSpecError("pericardium ellipsoid contains no voxel centre")
    t = spec.fat_shell_mm
    if t > 0:
        inner = ((X - cx) / max(ax - t, 1e-9)) ** 2 + ((Y - cy) / max(ay - t, 1e-9)) ** 2 + (
            (Z - cz) / max(az - t, 1e-9)
        ) ** 2 <= 1.0
        shell = peri & ~inner if min(ax, ay, az) > t else peri.copy()
    else:
        shell = np.zeros_like(peri)
    slab_of_z = _slab_of_z(peri)

    hu = np.full(peri.shape, spec.background_hu, dtype=np.int64)
    hu[peri] = spec.heart_hu
    hu[shell] = _fat_values(spec, rng, shell, slab_of_z)

    territory = np.zeros(peri.shape, dtype=np.int64)
    territory[peri] = (1 + (X >= cx) + 2 * (Y >= cy))[peri]

    occupied = np.zeros(peri.shape, dtype=bool)
    lesion_voxels = []
    for k, lesion in enumerate(spec.lesions):
        if lesion.territory not in (1, 2, 3, 4):
            raise PhantomSpecError(f"lesion {k}: territory must be 1..4")
        if lesion.hu - lesion.hu_jitter < 130:
            raise PhantomSpecError(f"lesion {k}: HU must stay at or above 130")
        m = _lesion_mask(lesion, X, Y, Z)
        if not m.any():
            raise PhantomSpecError(f"lesion {k} covers no voxel centre")
        if np.any(m & ~peri):
            raise PhantomSpecError(f"lesion {k} lies outside the heart mask")
        # lesions must not touch (26-neighbourhood) so they stay separate components
        grown = m.copy()
        for axis in range(3):
            grown = grown | np.roll(grown, 1, axis) | np.roll(grown, -1, axis)
        if np.any(grown & occupied):
            raise PhantomSpecError(f"lesion {k} touches another lesion")
        occupied |= m
        n = int(m.sum())
        if lesion.hu_jitter:
            values = lesion.hu + rng.integers(-lesion.hu_jitter, lesion.hu_jitter + 1, size=n)
        else:
            values = np.full(n, lesion.hu, dtype=np.int64)
        hu[m] = values
        territory[m] = lesion.territory
        lesion_voxels.append(m)

    volume = Volume(geometry, hu.astype(np.int16))
    heart = MaskVolume(geometry, peri.astype(np.uint8), "binary")
    pericardium = MaskVolume(geometry, peri.astype(np.uint8), "binary")
    territory_mask = MaskVolume(geometry, territory.astype(np.uint8), "territory")
    truth = _count_truth(spec, hu, peri, lesion_voxels, slab_of_z)
    return volume, heart, pericardium, territory_mask, truth


def _count_truth(spec, hu, peri, lesion_voxels, slab_of_z) -> GroundTruth:
    sx, sy, sz = spec.spacing
    vv = sx * sy * sz
    lesions = []
    for lesion, m in zip(spec.lesions, lesion_voxels):
        zs = np.nonzero(m)[0]
        vals = hu[m]
        score, detectable = _agatston_truth(zs, vals, spec.spacing)
        lesions.append(
            LesionTruth(
                territory=lesion.territory,
                voxel_count=int(m.sum()),
                volume_mm3=int(m.sum()) * vv,
                hu_min=int(vals.min()),
                hu_max=int(vals.max()),
                hu_mean=int(vals.sum()) / vals.size,
                agatston=score,
                detectable=detectable,
            )
        )
    kept = [lt for lt in lesions if lt.detectable]
    territory_agatston = {c: sum(lt.agatston for lt in kept if lt.territory == c) for c in (1, 2, 3, 4)}
    fat = peri & (hu >= FAT_BAND_LOW) & (hu <= FAT_BAND_HIGH)
    slab_counts = [0, 0, 0, 0]
    band_counts = [[0] * 8 for _ in range(4)]
    for z, value in zip(np.nonzero(fat)[0], hu[fat]):
        q = int(slab_of_z[z]) - 1
        slab_counts[q] += 1
        band_counts[q][min(7, (int(value) - FAT_BAND_LOW) // 20)] += 1
    return GroundTruth(
        lesions=lesions,
        total_agatston=sum(territory_agatston[c] for c in (1, 2, 3, 4)),
        territory_agatston=territory_agatston,
        fat_count=int(fat.sum()),
        fat_slab_counts=slab_counts,
        fat_slab_band_counts=band_counts,
        voxel_volume_mm3=vv,
    )


BAND_EDGE_HU = (130, 199, 200, 299, 300, 399, 400, 401, 650)


def random_phantom_spec(seed: int, n_lesions: int | None = None) -> PhantomSpec:
    """Randomized phantom whose voxel areas and slice factor are exact binary fractions."""
    rng = np.random.default_rng(seed)
    sx = float(rng.choice([0.5, 0.625, 0.75, 1.0]))
    sz = float(rng.choice([1.5, 3.0]))
    nx = ny = int(rng.integers(40, 57))
    nz = int(rng.integers(14, 23))
    spacing = (sx, sx, sz)
    center = ((nx - 1) * sx / 2, (ny - 1) * sx / 2, (nz - 1) * sz / 2)
    semi = ((nx / 2 - 2) * sx, (ny / 2 - 2) * sx, (nz / 2 - 1.5) * sz)
    fat_modes = [
        int(rng.integers(-190, -29)),
        [int(v) for v in rng.integers(-190, -29, size=4)],
        {"values": [int(v) for v in rng.integers(-190, -29, size=3)], "weights": [1.0, 2.0, 1.0]},
    ]
    fat_hu = fat_modes[int(rng.integers(0, 3))]
    spec = PhantomSpec(
        dims=(nx, ny, nz),
        spacing=spacing,
        pericardium_semi_axes_mm=semi,
        fat_shell_mm=float(rng.uniform(1.5, 3.5)) * sx,
        fat_hu=fat_hu,
        seed=int(rng.integers(0, 2**31)),
    )
    n_lesions = int(rng.integers(0, 7)) if n_lesions is None else n_lesions
    X, Y, Z = _grid_mm(spec)
    ax, ay, az = semi
    core = (((X - center[0]) / (0.6 * ax)) ** 2 + ((Y - center[1]) / (0.6 * ay)) ** 2 + ((Z - center[2]) / (0.7 * az)) ** 2) <= 1
    candidates = np.argwhere(core)
    placed: list[LesionSpec] = []
    attempts = 0
    while len(placed) < n_lesions and attempts < 200:
        attempts += 1
        z, y, x = candidates[int(rng.integers(0, len(candidates)))]
        hu = int(rng.choice(BAND_EDGE_HU)) if rng.random() < 0.6 else int(rng.integers(130, 1200))
        ext = (int(rng.integers(1, 6)) * sx, int(rng.integers(1, 6)) * sx, int(rng.integers(1, 3)) * sz)
        lesion = LesionSpec(
            center_mm=(float(x * sx), float(y * sx), float(z * sz)),
            hu=hu,
            territory=int(rng.integers(1, 5)),
            shape="box",
            size_mm=tuple(e * 0.999 for e in ext),
            hu_jitter=int(rng.choice([0, 0, min(40, hu - 130)])),
        )
        trial = PhantomSpec(**{**spec.__dict__, "lesions": placed + [lesion]})
        try:
            generate_phantom(trial)
        except PhantomSpecError:
            continue
        placed.append(lesion)
    spec.lesions = placed
    return spec


# -- synthetic cohorts ---------------------------------------------------


@dataclass
class CohortSpec:
    n_rows: int = 1324
    n_features: int = 30
    informative: dict[int, float] = field(default_factory=lambda: {0: 3.0, 1: -2.5, 2: 2.0})
    noise: str = "normal"  # "normal", "uniform" or "lognormal"
    prevalence: float = 0.25
    seed: int = 0
    column_names: list[str] | None = None
    missing_rate: float = 0.0

    @classmethod
    def from_dict(cls, data: dict) -> CohortSpec:
        data = dict(data)
        if "informative" in data:
            data["informative"] = {int(k): float(v) for k, v in data["informative"].items()}
        return cls(**data)


class UnreachablePrevalenceError(ValueError):
    pass


def _draw(noise: str, rng, shape) -> np.ndarray:
    if noise == "normal":
        return rng.standard_normal(shape)
    if noise == "uniform":
        return rng.uniform(-math.sqrt(3), math.sqrt(3), shape)
    if noise == "lognormal":
        return rng.lognormal(0.0, 0.5, shape)
    raise ValueError(f"unknown noise distribution {noise!r}")


def solve_intercept(logits: np.ndarray, prevalence: float) -> float:
    """Intercept making the mean Bernoulli probability equal ``prevalence``."""
    if not 0.0 < prevalence < 1.0:
        raise UnreachablePrevalenceError(f"prevalence must lie in (0, 1), got {prevalence}")

    def gap(b):
        z = np.clip(logits + b, -700, 700)
        return float(np.mean(1.0 / (1.0 + np.exp(-z)))) - prevalence

    lo, hi = -50.0, 50.0
    while gap(lo) > 0:
        lo *= 2
        if lo < -1e6:
            raise UnreachablePrevalenceError("cannot reach the requested prevalence")
    while gap(hi) < 0:
        hi *= 2
        if hi > 1e6:
            raise UnreachablePrevalenceError("cannot reach the requested prevalence")
    return brentq(gap, lo, hi, xtol=1e-12)


def generate_cohort(spec: CohortSpec) -> FeatureTable:
    """Feature table with labels drawn from a logistic model on the informative columns."""
    if spec.n_rows < 2 or spec.n_features < 1:
        raise ValueError("need at least two rows and one feature")
    for idx, coef in spec.informative.items():
        if not 0 <= idx < spec.n_features:
            raise ValueError(f"informative index {idx} out of range")
        if not math.isfinite(coef):
            raise ValueError("coefficients must be finite")
    rng = np.random.default_rng(spec.seed)
    X = _draw(spec.noise, rng, (spec.n_rows, spec.n_features))
    logits = np.zeros(spec.n_rows)
    for idx in sorted(spec.informative):
        col = X[:, idx]
        logits += spec.informative[idx] * (col - col.mean()) / (col.std() or 1.0)
    b = solve_intercept(logits, spec.prevalence)
    p = 1.0 / (1.0 + np.exp(-np.clip(logits + b, -700, 700)))
    labels = (rng.random(spec.n_rows) < p).astype(np.int8)
    if spec.missing_rate > 0:
        X[rng.random(X.shape) < spec.missing_rate] = np.nan
    names = spec.column_names or [f"f{j:03d}" for j in range(spec.n_features)]
    if len(names) != spec.n_features:
        raise ValueError("column_names length must equal n_features")
    ids = [f"P{i + 1:05d}" for i in range(spec.n_rows)]
    return FeatureTable(names, ids, labels, X)


ABLATION_SIGNAL = {
    "ca_heart_agatston": 1.5,
    "ca_LAD_volume_mm3": 1.0,
    "fat_volume_mL": 1.5,
    "fat_PQ4_Vol": 1.0,
}


def ablation_cohort(n_rows: int = 600, seed: int = 0, signal: dict[str, float] | None = None) -> FeatureTable:
    """Cohort in the full registry layout whose label depends only on calcium and fat columns."""
    names = registry.full_layout()
    signal = ABLATION_SIGNAL if signal is None else signal
    informative = {names.index(k): v for k, v in signal.items()}
    return generate_cohort(CohortSpec(n_rows=n_rows, n_features=len(names), informative=informative, seed=seed, column_names=names))
