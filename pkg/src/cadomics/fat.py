"""Fat-omics: epicardial fat segmentation and morphology, intensity and slab/ribbon features."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import registry
from .moments import EMPTY, HUMoments, hu_moments, shannon_entropy_bits
from .volume import (
    MaskVolume,
    Volume,
    check_geometry,
    distance_transform_2d,
    distance_transform_3d,
    voxel_volume_mm3,
)

FAT_HU_LOW = registry.FAT_HU_LOW
FAT_HU_HIGH = registry.FAT_HU_HIGH
N_BANDS = 8


class EmptyPericardiumError(ValueError):
    pass


class EmptyFatError(ValueError):
    pass


def segment_fat(volume: Volume, pericardium_mask: MaskVolume) -> MaskVolume:
    """Fat = pericardium voxels with HU in [-190, -30], both ends inclusive."""
    geometry = check_geometry(volume, pericardium_mask)
    inside = pericardium_mask.inside
    if not inside.any():
        raise EmptyPericardiumError("pericardium mask is empty")
    hu = volume.voxels
    fat = inside & (hu >= FAT_HU_LOW) & (hu <= FAT_HU_HIGH)
    return MaskVolume(geometry, fat.astype(np.uint8), "binary")


def band_index(hu) -> np.ndarray:
    """20-HU band 0..7 over [-190, -30]; the top band is closed at -30."""
    return np.minimum((np.asarray(hu, dtype=np.int64) - FAT_HU_LOW) // 20, N_BANDS - 1)


@dataclass
class Morphology:
    volume_mL: float
    principal_axis_lengths_mm: tuple[float, float, float]
    mean_thickness_mm: float
    surface_area_mm2: float


def _surface_area(inside: np.ndarray, spacing) -> float:
    sx, sy, sz = spacing
    padded = np.pad(inside, 1, constant_values=False).astype(np.int8)
    faces = (sx * sy, sx * sz, sy * sz)  # normals along z, y, x
    return float(sum(np.count_nonzero(np.diff(padded, axis=a)) * faces[a] for a in range(3)))


def _exact_mean(values) -> float:
    values = np.asarray(values, dtype=np.float64)
    return math.fsum(values.tolist()) / values.size if values.size else 0.0


def _index_covariance(inside: np.ndarray, spacing) -> np.ndarray:
    """Population covariance (mm^2) of voxel centres, from exact integer index sums."""
    z, y, x = (a.astype(np.int64) for a in np.nonzero(inside))
    cols = (x, y, z)
    n = x.size
    sums = [int(c.sum()) for c in cols]
    cov = np.zeros((3, 3))
    for i in range(3):
        for j in range(i, 3):
            num = n * int((cols[i] * cols[j]).sum()) - sums[i] * sums[j]
            cov[i, j] = cov[j, i] = (num / (n * n)) * spacing[i] * spacing[j]
    return cov


def _thickness_map(inside: np.ndarray, spacing) -> np.ndarray:
    return 2.0 * distance_transform_3d(inside, spacing)


def morph_features(fat: MaskVolume) -> Morphology:
    inside = fat.inside
    n = int(np.count_nonzero(inside))
    if n == 0:
        return Morphology(0.0, (0.0, 0.0, 0.0), 0.0, 0.0)
    spacing = fat.geometry.spacing
    eig = np.clip(np.linalg.eigvalsh(_index_covariance(inside, spacing))[::-1], 0.0, None)
    axes = tuple(float(4.0 * math.sqrt(e)) for e in eig)
    thickness = _exact_mean(_thickness_map(inside, spacing)[inside])
    return Morphology(
        volume_mL=n * voxel_volume_mm3(spacing) / 1000.0,
        principal_axis_lengths_mm=axes,
        mean_thickness_mm=thickness,
        surface_area_mm2=_surface_area(inside, spacing),
    )


@dataclass
class Intensity:
    moments: HUMoments
    entropy_bits: float
    histogram: tuple[int, ...]


def _intensity(values) -> Intensity:
    values = np.asarray(values, dtype=np.int64)
    if values.size == 0:
        return Intensity(EMPTY, 0.0, (0,) * N_BANDS)
    hist = np.bincount(band_index(values), minlength=N_BANDS)
    return Intensity(hu_moments(values), shannon_entropy_bits(hist), tuple(int(c) for c in hist))


def intensity_features(volume: Volume, fat: MaskVolume) -> Intensity:
    """HU moments, 8-band histogram and base-2 histogram entropy over fat voxels."""
    check_geometry(volume, fat)
    inside = fat.inside
    if not inside.any():
        raise EmptyFatError("no fat voxels")
    return _intensity(volume.voxels[inside])


@dataclass
class SlabRibbonPartition:
    """Slab (1..4, 4 = superior) and ribbon (1..4, 1 = outermost) per voxel; 0 outside the pericardium."""

    slab: np.ndarray
    ribbon: np.ndarray


def spatial_partition(fat: MaskVolume, pericardium_mask: MaskVolume) -> SlabRibbonPartition:
    check_geometry(fat, pericardium_mask)
    peri = pericardium_mask.inside
    if np.any(fat.inside & ~peri):
        raise ValueError("fat mask extends outside the pericardium")
    slab = np.zeros(peri.shape, dtype=np.uint8)
    ribbon = np.zeros(peri.shape, dtype=np.uint8)
    zs = np.flatnonzero(peri.any(axis=(1, 2)))
    if zs.size == 0:
        return SlabRibbonPartition(slab, ribbon)
    z_lo, z_hi = int(zs[0]), int(zs[-1])
    n_slices = z_hi - z_lo + 1
    sx, sy, _ = pericardium_mask.geometry.spacing
    for z in zs:
        cross = peri[z]
        slab[z][cross] = ((int(z) - z_lo) * 4) // n_slices + 1
        dist = distance_transform_2d(cross, (sx, sy))
        dmax = dist.max()
        quart = np.minimum(np.floor(4.0 * dist[cross] / dmax).astype(np.int64), 3)
        ribbon[z][cross] = quart + 1
    return SlabRibbonPartition(slab, ribbon)


@dataclass
class FatFeatureSet:
    voxel_volume_mm3: float
    pericardium_count: int
    total_count: int
    morphology: Morphology
    intensity: Intensity
    slab_counts: np.ndarray  # (4,)
    ribbon_counts: np.ndarray  # (4,)
    slab_ribbon_counts: np.ndarray  # (4, 4)
    slab_band_counts: np.ndarray  # (4, 8)
    ribbon_band_counts: np.ndarray  # (4, 8)
    slab_intensity: list[Intensity]
    ribbon_intensity: list[Intensity]
    slab_ribbon_moments: list[list[HUMoments]]
    slab_thickness_mm: list[float]

    def mL(self, count) -> float:
        return float(count) * self.voxel_volume_mm3 / 1000.0

    @property
    def total_volume_mL(self) -> float:
        return self.mL(self.total_count)

    @property
    def slab_volumes_mL(self) -> list[float]:
        return [self.mL(c) for c in self.slab_counts]

    @property
    def ribbon_volumes_mL(self) -> list[float]:
        return [self.mL(c) for c in self.ribbon_counts]


def banded_volumes(volume: Volume, fat: MaskVolume, partition: SlabRibbonPartition) -> dict[str, float]:
    """Fat volume (mL) per slab and 20-HU band, named ``P{slab}_Vol_{|lo|}_{|hi|}``."""
    inside = fat.inside
    slab = partition.slab[inside].astype(np.int64) - 1
    bands = band_index(volume.voxels[inside])
    counts = np.zeros((4, N_BANDS), dtype=np.int64)
    np.add.at(counts, (slab, bands), 1)
    vv = voxel_volume_mm3(volume.geometry.spacing)
    out = {}
    for q in range(4):
        for b, lo in enumerate(registry.FAT_BAND_EDGES[:-1]):
            out[f"P{registry.SLABS[q]}_Vol_{registry.fat_band_label(lo)}"] = counts[q, b] * vv / 1000.0
    return out


def compute_fat_features(volume: Volume, pericardium_mask: MaskVolume) -> FatFeatureSet:
    fat = segment_fat(volume, pericardium_mask)
    inside = fat.inside
    spacing = volume.geometry.spacing
    part = spatial_partition(fat, pericardium_mask)
    hu = volume.voxels[inside].astype(np.int64)
    slab = part.slab[inside].astype(np.int64) - 1
    ribbon = part.ribbon[inside].astype(np.int64) - 1
    bands = band_index(hu) if hu.size else np.zeros(0, dtype=np.int64)

    def counts2(a, b, shape):
        out = np.zeros(shape, dtype=np.int64)
        np.add.at(out, (a, b), 1)
        return out

    thickness = _thickness_map(inside, spacing)[inside] if hu.size else np.zeros(0)
    slab_thickness = [_exact_mean(thickness[slab == q]) for q in range(4)]
    return FatFeatureSet(
        voxel_volume_mm3=voxel_volume_mm3(spacing),
        pericardium_count=int(np.count_nonzero(pericardium_mask.inside)),
        total_count=int(hu.size),
        morphology=morph_features(fat),
        intensity=_intensity(hu),
        slab_counts=np.bincount(slab, minlength=4),
        ribbon_counts=np.bincount(ribbon, minlength=4),
        slab_ribbon_counts=counts2(slab, ribbon, (4, 4)),
        slab_band_counts=counts2(slab, bands, (4, N_BANDS)),
        ribbon_band_counts=counts2(ribbon, bands, (4, N_BANDS)),
        slab_intensity=[_intensity(hu[slab == q]) for q in range(4)],
        ribbon_intensity=[_intensity(hu[ribbon == r]) for r in range(4)],
        slab_ribbon_moments=[[hu_moments(hu[(slab == q) & (ribbon == r)]) for r in range(4)] for q in range(4)],
        slab_thickness_mm=slab_thickness,
    )


def _intensity_fields(prefix: str, it: Intensity) -> dict[str, float]:
    m = it.moments
    return {
        prefix + "hu_mean": m.mean,
        prefix + "hu_sd": m.sd,
        prefix + "hu_skewness": m.skewness,
        prefix + "hu_kurtosis": m.kurtosis,
        prefix + "hu_min": m.minimum,
        prefix + "hu_max": m.maximum,
        prefix + "hu_entropy_bits": it.entropy_bits,
    }


def fat_feature_vector(fs: FatFeatureSet) -> dict[str, float]:
    """All fat-omics columns, keyed and ordered by the fat registry."""
    morph = fs.morphology
    total = fs.total_count
    f: dict[str, float] = {
        "fat_volume_mL": fs.total_volume_mL,
        "fat_axis_major_mm": morph.principal_axis_lengths_mm[0],
        "fat_axis_mid_mm": morph.principal_axis_lengths_mm[1],
        "fat_axis_minor_mm": morph.principal_axis_lengths_mm[2],
        "fat_thickness_mean_mm": morph.mean_thickness_mm,
        "fat_surface_area_mm2": morph.surface_area_mm2,
        "fat_pericardium_volume_mL": fs.mL(fs.pericardium_count),
        "fat_pericardium_fraction": total / fs.pericardium_count if fs.pericardium_count else 0.0,
    }
    f.update(_intensity_fields("fat_", fs.intensity))
    bands = [registry.fat_band_label(lo) for lo in registry.FAT_BAND_EDGES[:-1]]
    for label, count in zip(bands, fs.intensity.histogram):
        f[f"fat_hist_{label}"] = float(count)
    for q, sname in enumerate(registry.SLABS):
        f[f"fat_P{sname}_Vol"] = fs.mL(fs.slab_counts[q])
    for r, rname in enumerate(registry.RIBBONS):
        f[f"fat_P{rname}_Vol"] = fs.mL(fs.ribbon_counts[r])
    for q, sname in enumerate(registry.SLABS):
        for r, rname in enumerate(registry.RIBBONS):
            f[f"fat_P{sname}{rname}_Vol"] = fs.mL(fs.slab_ribbon_counts[q, r])
    for q, sname in enumerate(registry.SLABS):
        for b, label in enumerate(bands):
            f[f"fat_P{sname}_Vol_{label}"] = fs.mL(fs.slab_band_counts[q, b])
    for r, rname in enumerate(registry.RIBBONS):
        for b, label in enumerate(bands):
            f[f"fat_P{rname}_Vol_{label}"] = fs.mL(fs.ribbon_band_counts[r, b])
    for q, sname in enumerate(registry.SLABS):
        f.update(_intensity_fields(f"fat_P{sname}_", fs.slab_intensity[q]))
    for r, rname in enumerate(registry.RIBBONS):
        f.update(_intensity_fields(f"fat_P{rname}_", fs.ribbon_intensity[r]))
    for q, sname in enumerate(registry.SLABS):
        for r, rname in enumerate(registry.RIBBONS):
            f[f"fat_P{sname}{rname}_hu_mean"] = fs.slab_ribbon_moments[q][r].mean
            f[f"fat_P{sname}{rname}_hu_sd"] = fs.slab_ribbon_moments[q][r].sd
    for q, sname in enumerate(registry.SLABS):
        f[f"fat_P{sname}_thickness_mean_mm"] = fs.slab_thickness_mm[q]
        f[f"fat_P{sname}_fraction"] = fs.slab_counts[q] / total if total else 0.0
    for r, rname in enumerate(registry.RIBBONS):
        f[f"fat_P{rname}_fraction"] = fs.ribbon_counts[r] / total if total else 0.0

    names = registry.names("fat")
    if set(f) != set(names):
        raise RuntimeError(f"fat features drifted from registry: {sorted(set(f) ^ set(names))[:5]}")
    return {name: float(f[name]) for name in names}


def extract_fat_features(volume: Volume, pericardium_mask: MaskVolume) -> dict[str, float]:
    return fat_feature_vector(compute_fat_features(volume, pericardium_mask))
