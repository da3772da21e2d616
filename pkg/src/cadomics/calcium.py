"""Calcium-omics: lesion, coronary-territory and whole-heart calcification features."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial.distance import pdist

from . import registry
from .moments import HUMoments, hu_moments
from .volume import (
    TERRITORY_CODES,
    MaskVolume,
    Volume,
    bbox_diagonal_mm,
    check_geometry,
    connected_components,
    voxel_centers_mm,
    voxel_volume_mm3,
)

CALCIUM_THRESHOLD_HU = 130
MIN_AREA_MM2 = 1.0
DEFAULT_MASS_CALIBRATION = 0.001  # mgEq per (mm^3 * HU)

CAC_CATEGORIES = ("absent", "mild", "moderate", "severe")


@dataclass
class LesionRecord:
    id: int
    territory: int
    voxel_count: int
    volume_mm3: float
    mass_mgEq: float
    hu_min: float
    hu_max: float
    hu_mean: float
    hu_variance: float
    skewness: float
    kurtosis: float
    centroid_mm: tuple[float, float, float]
    max_diameter_mm: float
    sphericity: float
    elongation: float
    dist_next_lesion_mm: float = 0.0
    dist_to_top_mm: float = 0.0
    agatston: float = 0.0
    voxel_indices: np.ndarray = field(default=None, repr=False, compare=False)
    hu_values: np.ndarray = field(default=None, repr=False, compare=False)


@dataclass
class TerritorySummary:
    territory: int
    lesion_count: int
    agatston_sum: float
    volume_sum: float
    mass_sum: float
    moments: HUMoments
    diffusivity: float
    histogram: tuple[int, ...]
    lesions: list[LesionRecord] = field(default_factory=list, repr=False)

    @property
    def hu_mean(self):
        return self.moments.mean

    @property
    def hu_sd(self):
        return self.moments.sd


@dataclass
class HeartCalciumSummary:
    total_agatston: float
    total_volume: float
    total_mass: float
    lesion_count: int
    moments: HUMoments
    histogram: tuple[int, ...]
    cac_category: str
    diffusivity: float
    territories_involved: int


def agatston_weight(max_hu: float) -> int:
    if max_hu < CALCIUM_THRESHOLD_HU:
        return 0
    if max_hu < 200:
        return 1
    if max_hu < 300:
        return 2
    if max_hu < 400:
        return 3
    return 4


def _slice_table(voxel_indices: np.ndarray, volume: Volume):
    """Per axial slice (ascending z): voxel count and maximum HU."""
    nz, ny, nx = volume.geometry.shape
    z = voxel_indices // (nx * ny)
    hu = volume.voxels.ravel()[voxel_indices]
    slices = np.unique(z)
    counts = [int(np.count_nonzero(z == s)) for s in slices]
    maxima = [int(hu[z == s].max()) for s in slices]
    return slices, counts, maxima


def agatston_lesion(voxel_indices, volume: Volume, min_area_mm2: float = MIN_AREA_MM2) -> float:
    """Agatston score of one lesion: per-slice area x density weight, scaled by slice spacing / 3 mm."""
    voxel_indices = np.asarray(voxel_indices, dtype=np.int64)
    if voxel_indices.size == 0:
        return 0.0
    sx, sy, sz = volume.spacing
    total = 0.0
    for _, count, max_hu in zip(*_slice_table(voxel_indices, volume)):
        area = count * sx * sy
        if area < min_area_mm2:
            continue
        total += area * agatston_weight(max_hu)
    return (sz / 3.0) * total


def calcium_mass(volume_mm3: float, hu_mean: float, calibration: float = DEFAULT_MASS_CALIBRATION) -> float:
    return volume_mm3 * hu_mean * calibration


def cac_category(score: float) -> str:
    """Score band: 0 absent, (0, 100] mild, (100, 400) moderate, >= 400 severe."""
    if score < 0 or math.isnan(score):
        raise ValueError(f"Agatston score must be nonnegative, got {score}")
    if score == 0:
        return "absent"
    if score <= 100:
        return "mild"
    if score < 400:
        return "moderate"
    return "severe"


def _face_area(inside: np.ndarray, spacing) -> float:
    """Exposed voxel-face area of a (z, y, x) boolean grid."""
    sx, sy, sz = spacing
    padded = np.pad(inside, 1, constant_values=False)
    per_axis = (sx * sy, sx * sz, sy * sz)  # faces normal to z, y, x
    area = 0.0
    for axis, face in enumerate(per_axis):
        exposed = np.count_nonzero(np.diff(padded.astype(np.int8), axis=axis))
        area += exposed * face
    return area


def _shape_descriptors(voxel_indices: np.ndarray, geometry, centers: np.ndarray):
    spacing = geometry.spacing
    zyx = np.unravel_index(voxel_indices, geometry.shape)
    lo = [int(a.min()) for a in zyx]
    hi = [int(a.max()) + 1 for a in zyx]
    box = np.zeros([h - l for l, h in zip(lo, hi)], dtype=bool)
    box[tuple(a - l for a, l in zip(zyx, lo))] = True
    area = _face_area(box, spacing)
    vol = voxel_indices.size * voxel_volume_mm3(spacing)
    sphericity = min(1.0, math.pi ** (1 / 3) * (6 * vol) ** (2 / 3) / area)
    # second moment of the union of voxel boxes, so single voxels stay finite
    cov = np.cov(centers.T, ddof=0) if len(centers) > 1 else np.zeros((3, 3))
    cov = cov + np.diag([s * s / 12.0 for s in spacing])
    eig = np.linalg.eigvalsh(cov)
    elongation = max(1.0, math.sqrt(eig[-1] / eig[0]))
    diameter = float(pdist(centers).max()) if len(centers) > 1 else 0.0
    return sphericity, elongation, diameter


def _assign_territory(voxel_indices, territory_labels: np.ndarray, centroid, geometry) -> int:
    codes = territory_labels[voxel_indices]
    codes = codes[codes > 0]
    if codes.size:
        counts = np.bincount(codes, minlength=5)
        return int(np.argmax(counts))  # argmax returns the lowest code on ties
    # lesion lies wholly outside the territory map: nearest labelled voxel
    labelled = np.flatnonzero(territory_labels)
    if labelled.size == 0:
        raise ValueError("territory mask has no labelled voxels")
    d2 = ((voxel_centers_mm(labelled, geometry) - np.asarray(centroid)) ** 2).sum(axis=1)
    return int(territory_labels[labelled[int(np.argmin(d2))]])


def _centroid(voxel_indices, geometry) -> tuple[float, float, float]:
    z, y, x = np.unravel_index(voxel_indices, geometry.shape)
    n = voxel_indices.size
    sx, sy, sz = geometry.spacing
    ox, oy, oz = geometry.origin
    return (
        ox + (int(x.sum()) / n) * sx,
        oy + (int(y.sum()) / n) * sy,
        oz + (int(z.sum()) / n) * sz,
    )


def extract_lesions(
    volume: Volume,
    heart_mask: MaskVolume,
    territory_mask: MaskVolume,
    *,
    connectivity: int = 26,
    min_area_mm2: float = MIN_AREA_MM2,
    mass_calibration: float = DEFAULT_MASS_CALIBRATION,
) -> list[LesionRecord]:
    """Calcified lesions: connected sets of heart voxels at or above 130 HU.

    Components whose largest single-slice area is below ``min_area_mm2`` are
    dropped. Spatial fields are filled by :func:`lesion_spatial`.
    """
    geometry = check_geometry(volume, heart_mask, territory_mask)
    hu = volume.voxels
    candidate = heart_mask.inside & (hu >= CALCIUM_THRESHOLD_HU)
    comps = connected_components(candidate, connectivity)
    sx, sy, _ = geometry.spacing
    flat_hu = hu.ravel()
    flat_territory = territory_mask.labels.ravel()
    vv = voxel_volume_mm3(geometry.spacing)
    lesions = []
    for comp in comps.components:
        idx = comp.voxel_indices
        _, counts, _ = _slice_table(idx, volume)
        if max(counts) * sx * sy < min_area_mm2:
            continue
        values = flat_hu[idx]
        mom = hu_moments(values)
        centroid = _centroid(idx, geometry)
        centers = voxel_centers_mm(idx, geometry)
        sphericity, elongation, diameter = _shape_descriptors(idx, geometry, centers)
        vol = comp.voxel_count * vv
        lesions.append(
            LesionRecord(
                id=len(lesions) + 1,
                territory=_assign_territory(idx, flat_territory, centroid, geometry),
                voxel_count=comp.voxel_count,
                volume_mm3=vol,
                mass_mgEq=calcium_mass(vol, mom.mean, mass_calibration),
                hu_min=mom.minimum,
                hu_max=mom.maximum,
                hu_mean=mom.mean,
                hu_variance=mom.variance,
                skewness=mom.skewness,
                kurtosis=mom.kurtosis,
                centroid_mm=centroid,
                max_diameter_mm=diameter,
                sphericity=sphericity,
                elongation=elongation,
                agatston=agatston_lesion(idx, volume, min_area_mm2),
                voxel_indices=idx,
                hu_values=values,
            )
        )
    return lesion_spatial(lesions, volume, heart_mask)


def lesion_spatial(lesions: list[LesionRecord], volume: Volume, heart_mask: MaskVolume) -> list[LesionRecord]:
    """Nearest-neighbour centroid distance and depth below the top slice.

    A lone lesion gets the heart-mask bounding-box diagonal as its neighbour
    distance.
    """
    if not lesions:
        return []
    geometry = volume.geometry
    top_z = geometry.origin[2] + (geometry.dims[2] - 1) * geometry.spacing[2]
    cents = np.array([lesion.centroid_mm for lesion in lesions], dtype=np.float64)
    if len(lesions) == 1:
        nearest = [bbox_diagonal_mm(heart_mask.inside, geometry.spacing)]
    else:
        d = np.sqrt(((cents[:, None, :] - cents[None, :, :]) ** 2).sum(axis=2))
        np.fill_diagonal(d, np.inf)
        nearest = d.min(axis=1).tolist()
    return [
        replace(
            lesion,
            dist_next_lesion_mm=float(near),
            dist_to_top_mm=max(0.0, top_z - lesion.centroid_mm[2]),
        )
        for lesion, near in zip(lesions, nearest)
    ]


def _histogram(values) -> tuple[int, ...]:
    values = np.asarray(values, dtype=np.int64)
    bins = np.clip((values - CALCIUM_THRESHOLD_HU) // 100, 0, 7)
    return tuple(int(c) for c in np.bincount(bins, minlength=8))


def _diffusivity(lesions, extent_mask: np.ndarray, spacing) -> float:
    if len(lesions) == 0:
        return 0.0
    if len(lesions) == 1:
        return 1.0
    diag = bbox_diagonal_mm(extent_mask, spacing)
    if diag == 0:
        return 0.0
    cents = np.array([lesion.centroid_mm for lesion in lesions])
    return float(pdist(cents).mean() / diag)


def _pooled_values(lesions) -> np.ndarray:
    if not lesions:
        return np.zeros(0, dtype=np.int64)
    return np.concatenate([np.asarray(lesion.hu_values, dtype=np.int64) for lesion in lesions])


def territory_aggregate(lesions: list[LesionRecord], territory_mask: MaskVolume) -> dict[int, TerritorySummary]:
    spacing = territory_mask.geometry.spacing
    out = {}
    for code in TERRITORY_CODES:
        members = [lesion for lesion in lesions if lesion.territory == code]
        values = _pooled_values(members)
        out[code] = TerritorySummary(
            territory=code,
            lesion_count=len(members),
            agatston_sum=sum(m.agatston for m in members),
            volume_sum=sum(m.volume_mm3 for m in members),
            mass_sum=sum(m.mass_mgEq for m in members),
            moments=hu_moments(values),
            diffusivity=_diffusivity(members, territory_mask.labels == code, spacing),
            histogram=_histogram(values),
            lesions=members,
        )
    return out


def heart_aggregate(
    territories: dict[int, TerritorySummary], heart_mask: MaskVolume | None = None
) -> HeartCalciumSummary:
    summaries = [territories[c] for c in sorted(territories)]
    lesions = [lesion for s in summaries for lesion in s.lesions]
    lesions.sort(key=lambda lesion: lesion.id)
    values = _pooled_values(lesions)
    total = sum(s.agatston_sum for s in summaries)
    if heart_mask is not None:
        diffusivity = _diffusivity(lesions, heart_mask.inside, heart_mask.geometry.spacing)
    else:
        diffusivity = 0.0 if not lesions else 1.0
    return HeartCalciumSummary(
        total_agatston=total,
        total_volume=sum(s.volume_sum for s in summaries),
        total_mass=sum(s.mass_sum for s in summaries),
        lesion_count=sum(s.lesion_count for s in summaries),
        moments=hu_moments(values),
        histogram=_histogram(values),
        cac_category=cac_category(total),
        diffusivity=diffusivity,
        territories_involved=sum(1 for s in summaries if s.lesion_count > 0),
    )


def _stats(values, which=("mean", "max", "min", "sd")) -> dict[str, float]:
    if len(values) == 0:
        return {w: 0.0 for w in which}
    arr = np.asarray(values, dtype=np.float64)
    full = {"mean": float(arr.mean()), "max": float(arr.max()), "min": float(arr.min()), "sd": float(arr.std())}
    return {w: full[w] for w in which}


def _ratio(num: float, den: float) -> float:
    return num / den if den > 0 else 0.0


_LESION_ATTR = {
    "volume_mm3": "volume_mm3",
    "mass_mg": "mass_mgEq",
    "agatston": "agatston",
    "hu_mean": "hu_mean",
    "hu_max": "hu_max",
    "max_diameter_mm": "max_diameter_mm",
    "sphericity": "sphericity",
    "elongation": "elongation",
    "dist_next_mm": "dist_next_lesion_mm",
    "dist_to_top_mm": "dist_to_top_mm",
}


def calcium_feature_vector(
    lesions: list[LesionRecord],
    territories: dict[int, TerritorySummary],
    heart: HeartCalciumSummary,
) -> dict[str, float]:
    """All calcium-omics columns, keyed and ordered by the calcium registry."""
    f: dict[str, float] = {}
    for code, tname in TERRITORY_CODES.items():
        t = territories[code]
        p = f"ca_{tname}_"
        m = t.moments
        f[p + "lesion_count"] = float(t.lesion_count)
        f[p + "agatston"] = t.agatston_sum
        f[p + "volume_mm3"] = t.volume_sum
        f[p + "mass_mg"] = t.mass_sum
        f[p + "diffusivity"] = t.diffusivity
        f[p + "hu_mean"] = m.mean
        f[p + "hu_sd"] = m.sd
        f[p + "hu_skewness"] = m.skewness
        f[p + "hu_kurtosis"] = m.kurtosis
        f[p + "hu_min"] = m.minimum
        f[p + "hu_max"] = m.maximum
        for name, count in zip(registry.calcium_hist_names(p), t.histogram):
            f[name] = float(count)
        members = t.lesions
        f[p + "lesion_volume_mean"] = _stats([x.volume_mm3 for x in members])["mean"]
        f[p + "lesion_volume_max"] = _stats([x.volume_mm3 for x in members])["max"]
        f[p + "lesion_mass_mean"] = _stats([x.mass_mgEq for x in members])["mean"]
        f[p + "lesion_agatston_max"] = _stats([x.agatston for x in members])["max"]
        f[p + "lesion_sphericity_mean"] = _stats([x.sphericity for x in members])["mean"]
        f[p + "lesion_elongation_mean"] = _stats([x.elongation for x in members])["mean"]
        f[p + "lesion_diameter_max"] = _stats([x.max_diameter_mm for x in members])["max"]
        top = _stats([x.dist_to_top_mm for x in members])
        f[p + "dist_to_top_mean"] = top["mean"]
        f[p + "dist_to_top_min"] = top["min"]
        f[p + "dist_next_mean"] = _stats([x.dist_next_lesion_mm for x in members])["mean"]
        f[p + "agatston_fraction"] = _ratio(t.agatston_sum, heart.total_agatston)
        f[p + "volume_fraction"] = _ratio(t.volume_sum, heart.total_volume)
        f[p + "mass_fraction"] = _ratio(t.mass_sum, heart.total_mass)

    hm = heart.moments
    f["ca_heart_agatston"] = heart.total_agatston
    f["ca_heart_volume_mm3"] = heart.total_volume
    f["ca_heart_mass_mg"] = heart.total_mass
    f["ca_heart_lesion_count"] = float(heart.lesion_count)
    f["ca_heart_hu_mean"] = hm.mean
    f["ca_heart_hu_sd"] = hm.sd
    f["ca_heart_hu_skewness"] = hm.skewness
    f["ca_heart_hu_kurtosis"] = hm.kurtosis
    f["ca_heart_hu_min"] = hm.minimum
    f["ca_heart_hu_max"] = hm.maximum
    for name, count in zip(registry.calcium_hist_names("ca_heart_"), heart.histogram):
        f[name] = float(count)
    f["ca_heart_cac_category"] = float(CAC_CATEGORIES.index(heart.cac_category))
    f["ca_heart_territories_involved"] = float(heart.territories_involved)
    f["ca_heart_diffusivity"] = heart.diffusivity

    for feat, attr in _LESION_ATTR.items():
        stats = _stats([getattr(x, attr) for x in lesions], registry.LESION_SUMMARY_STATS)
        for s, v in stats.items():
            f[f"ca_lesion_{feat}_{s}"] = v

    names = registry.names("calcium")
    if set(f) != set(names):
        raise RuntimeError(f"calcium features drifted from registry: {sorted(set(f) ^ set(names))[:5]}")
    return {name: f[name] for name in names}


def extract_calcium_features(
    volume: Volume,
    heart_mask: MaskVolume,
    territory_mask: MaskVolume,
    **kwargs,
) -> dict[str, float]:
    lesions = extract_lesions(volume, heart_mask, territory_mask, **kwargs)
    territories = territory_aggregate(lesions, territory_mask)
    heart = heart_aggregate(territories, heart_mask)
    return calcium_feature_vector(lesions, territories, heart)
