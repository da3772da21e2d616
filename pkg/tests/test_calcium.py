from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cadomics import registry
from cadomics.calcium import (
    CAC_CATEGORIES,
    agatston_lesion,
    agatston_weight,
    cac_category,
    calcium_feature_vector,
    calcium_mass,
    extract_calcium_features,
    extract_lesions,
    heart_aggregate,
    territory_aggregate,
)
from cadomics.phantom import LesionSpec, PhantomSpec, generate_phantom, random_phantom_spec
from cadomics.volume import MaskVolume, Volume

from helpers import scene


def test_no_calcium_gives_empty_list_and_zero_vector():
    vol, heart, terr = scene(np.full((3, 6, 6), 50))
    assert extract_lesions(vol, heart, terr) == []
    f = extract_calcium_features(vol, heart, terr)
    assert list(f) == registry.names("calcium")
    assert all(v == 0.0 for v in f.values())


def test_block_lesion_hand_count():
    hu = np.zeros((3, 6, 6), int)
    hu[1, 1:4, 2:5] = 300
    vol, heart, terr = scene(hu, spacing=(1.0, 1.0, 3.0))
    (lesion,) = extract_lesions(vol, heart, terr)
    assert lesion.voxel_count == 9
    assert lesion.volume_mm3 == 27.0
    assert lesion.hu_mean == 300.0
    assert lesion.territory == 2  # LAD
    assert lesion.mass_mgEq == pytest.approx(8.1, abs=1e-12)


def test_agatston_hand_cases():
    hu = np.zeros((1, 4, 5), int)
    hu[0, :2, :] = 250  # 10 voxels of 0.5 x 0.5 mm
    vol = Volume.from_array(hu, spacing=(0.5, 0.5, 3.0))
    idx = np.flatnonzero(hu.ravel())
    assert agatston_lesion(idx, vol) == 5.0
    hu[0, 0, 0] = 400
    vol = Volume.from_array(hu, spacing=(0.5, 0.5, 3.0))
    assert agatston_lesion(idx, vol) == 10.0
    assert agatston_lesion(np.array([], int), vol) == 0.0


def test_small_slices_do_not_count():
    hu = np.zeros((2, 4, 4), int)
    hu[0, 0, 0:3] = 500  # 3 x 0.25 = 0.75 mm^2, below the minimum
    hu[1, 0, 0:2] = 500
    hu[1, 1, 0:2] = 500  # 1.0 mm^2 exactly: counts
    vol = Volume.from_array(hu, spacing=(0.5, 0.5, 1.5))
    idx = np.flatnonzero(hu.ravel())
    assert agatston_lesion(idx, vol) == 0.5 * 1.0 * 4


def test_lesion_below_minimum_area_is_dropped():
    hu = np.zeros((2, 4, 4), int)
    hu[0, 0, 0] = 600
    vol, heart, terr = scene(hu, spacing=(0.5, 0.5, 3.0))
    assert extract_lesions(vol, heart, terr) == []


@pytest.mark.parametrize("hu,w", [(129, 0), (130, 1), (199, 1), (200, 2), (299, 2), (300, 3), (399, 3), (400, 4), (3000, 4)])
def test_weight_bands(hu, w):
    assert agatston_weight(hu) == w


@pytest.mark.parametrize("score,cat", [(0, "absent"), (1, "mild"), (100, "mild"), (101, "moderate"), (399.9, "moderate"), (400, "severe")])
def test_cac_bands(score, cat):
    assert cac_category(score) == cat


@given(st.floats(0, 5000), st.floats(0, 5000))
def test_cac_monotone(a, b):
    lo, hi = sorted((a, b))
    assert CAC_CATEGORIES.index(cac_category(lo)) <= CAC_CATEGORIES.index(cac_category(hi))


def test_cac_negative_raises():
    with pytest.raises(ValueError):
        cac_category(-1)


def test_mass_linear_in_calibration():
    assert calcium_mass(27.0, 300.0, 0.001) == pytest.approx(8.1)
    assert calcium_mass(27.0, 300.0, 0.002) == 2 * calcium_mass(27.0, 300.0, 0.001)
    assert calcium_mass(0.0, 0.0) == 0.0


def two_lesion_scene():
    hu = np.zeros((1, 10, 10), int)
    hu[0, 0, 0] = 300
    hu[0, 4, 3] = 300  # centroids (0,0,0) and (3,4,0) mm
    vol = Volume.from_array(hu, spacing=(1.0, 1.0, 3.0))
    g = vol.geometry
    heart = MaskVolume.from_array(np.ones(hu.shape), g)
    terr = MaskVolume.from_array(np.full(hu.shape, 2), g, "territory")
    return vol, heart, terr


def test_dist_next_pythagoras():
    vol, heart, terr = two_lesion_scene()
    lesions = extract_lesions(vol, heart, terr, min_area_mm2=0.5)
    assert [le.dist_next_lesion_mm for le in lesions] == [5.0, 5.0]
    assert [le.dist_to_top_mm for le in lesions] == [0.0, 0.0]  # single slice = top slice


def test_single_lesion_dist_next_is_heart_diagonal():
    hu = np.zeros((2, 6, 6), int)
    hu[1, 2, 2] = 300
    heart = np.zeros(hu.shape)
    heart[:, 1:5, 0:4] = 1
    vol, hm, terr = scene(hu, spacing=(1.0, 1.0, 3.0), heart=heart)
    (lesion,) = extract_lesions(vol, hm, terr)
    assert lesion.dist_next_lesion_mm == pytest.approx(np.sqrt(4**2 + 4**2 + 6**2))


def test_diffusivity_cases():
    vol, heart, terr = two_lesion_scene()
    lesions = extract_lesions(vol, heart, terr, min_area_mm2=0.5)
    summ = territory_aggregate(lesions, terr)
    assert summ[1].diffusivity == 0.0 and summ[2].lesion_count == 2
    diag = np.sqrt(10**2 + 10**2 + 3**2)
    assert summ[2].diffusivity == pytest.approx(5.0 / diag)
    assert territory_aggregate(lesions[:1], terr)[2].diffusivity == 1.0


def test_diffusivity_ratio_formula():
    # two lesions 10 mm apart in a territory whose voxel-edge bounding box has a 50 mm diagonal
    hu = np.zeros((1, 40, 30), int)
    hu[0, 0, 0] = 300
    hu[0, 0, 10] = 300
    terr = np.zeros(hu.shape, int)
    terr[0] = 3
    vol = Volume.from_array(hu, spacing=(1.0, 1.0, 1.0))
    heart = MaskVolume.from_array(np.ones(hu.shape), vol.geometry)
    tm = MaskVolume.from_array(terr, vol.geometry, "territory")
    lesions = extract_lesions(vol, heart, tm, min_area_mm2=1.0)
    assert territory_aggregate(lesions, tm)[3].diffusivity == pytest.approx(10.0 / np.sqrt(40**2 + 30**2 + 1))


def test_heart_totals_and_category():
    hu = np.zeros((3, 8, 8), int)
    hu[1, 0:2, 0:2] = 150
    hu[1, 5:7, 5:7] = 250
    terr = np.full(hu.shape, 1)
    terr[:, 4:, :] = 4
    vol, heart, tm = scene(hu, spacing=(1.0, 1.0, 3.0), territory=terr)
    lesions = extract_lesions(vol, heart, tm)
    terrs = territory_aggregate(lesions, tm)
    h = heart_aggregate(terrs, heart)
    assert h.total_agatston == 4 * 1 + 4 * 2 == sum(t.agatston_sum for t in terrs.values())
    assert h.cac_category == "mild" and h.territories_involved == 2
    f = calcium_feature_vector(lesions, terrs, h)
    assert f["ca_heart_agatston"] == 12.0 and f["ca_LM_agatston"] == 4.0 and f["ca_RCA_agatston"] == 8.0
    assert f["ca_LM_agatston_fraction"] + f["ca_RCA_agatston_fraction"] == 1.0


def test_plurality_territory_lowest_code_on_tie():
    hu = np.zeros((1, 4, 4), int)
    hu[0, 1, 0:4] = 300
    terr = np.zeros(hu.shape, int)
    terr[0, :, 0:2] = 3
    terr[0, :, 2:4] = 2
    vol, heart, tm = scene(hu, spacing=(1.0, 1.0, 1.0), territory=terr)
    (lesion,) = extract_lesions(vol, heart, tm)
    assert lesion.territory == 2


def test_lesion_outside_territory_labels_uses_nearest():
    hu = np.zeros((1, 5, 5), int)
    hu[0, 0, 0:2] = 300
    terr = np.zeros(hu.shape, int)
    terr[0, 4, 4] = 4
    terr[0, 2, 0] = 1
    vol = Volume.from_array(hu, spacing=(1.0, 1.0, 1.0))
    heart = MaskVolume.from_array(np.ones(hu.shape), vol.geometry)
    tm = MaskVolume.from_array(terr, vol.geometry, "territory")
    (lesion,) = extract_lesions(vol, heart, tm)
    assert lesion.territory == 1


def test_two_planted_lesions_counted():
    spec = PhantomSpec(
        dims=(32, 32, 12),
        spacing=(0.5, 0.5, 3.0),
        pericardium_semi_axes_mm=(7.0, 7.0, 16.0),
        lesions=[
            LesionSpec(center_mm=(6.0, 6.0, 15.0), hu=300, territory=1, size_mm=(1.9, 1.9, 2.9)),
            LesionSpec(center_mm=(10.0, 10.0, 18.0), hu=450, territory=4, size_mm=(2.9, 1.4, 5.9)),
        ],
    )
    vol, heart, _, terr, truth = generate_phantom(spec)
    lesions = extract_lesions(vol, heart, terr)
    assert sorted(le.voxel_count for le in lesions) == sorted(t.voxel_count for t in truth.lesions)


def test_shape_descriptors_of_a_cube():
    hu = np.zeros((5, 5, 5), int)
    hu[1:4, 1:4, 1:4] = 300
    vol, heart, tm = scene(hu, spacing=(1.0, 1.0, 1.0))
    (lesion,) = extract_lesions(vol, heart, tm)
    assert lesion.elongation == pytest.approx(1.0)
    assert lesion.max_diameter_mm == pytest.approx(np.sqrt(12))
    assert lesion.sphericity == pytest.approx((np.pi ** (1 / 3)) * (6 * 27) ** (2 / 3) / 54)


def test_translation_shifts_only_dist_to_top():
    spec = random_phantom_spec(11, n_lesions=3)
    vol, heart, _, terr, _ = generate_phantom(spec)
    base = extract_lesions(vol, heart, terr)
    shifted_hu = np.full(vol.voxels.shape, -900, dtype=np.int16)
    shifted_hu[:-1] = vol.voxels[1:]  # move everything one slice down
    def shift(m):
        out = np.zeros_like(m.labels)
        out[:-1] = m.labels[1:]
        return MaskVolume(m.geometry, out, m.kind)
    moved = extract_lesions(Volume(vol.geometry, shifted_hu), shift(heart), shift(terr))
    sz = vol.geometry.spacing[2]
    assert len(moved) == len(base)
    for a, b in zip(base, moved):
        assert b.dist_to_top_mm == pytest.approx(a.dist_to_top_mm + sz, abs=1e-9)
        for attr in ("volume_mm3", "mass_mgEq", "agatston", "hu_mean", "hu_variance", "skewness", "kurtosis", "sphericity", "elongation"):
            assert getattr(a, attr) == pytest.approx(getattr(b, attr), rel=1e-12, abs=1e-12)


@pytest.mark.parametrize("seed", range(8))
def test_features_match_phantom_truth(seed):
    spec = random_phantom_spec(seed)
    vol, heart, _, terr, truth = generate_phantom(spec)
    f = extract_calcium_features(vol, heart, terr)
    assert len(f) == 189
    assert f["ca_heart_agatston"] == truth.total_agatston
    for code, name in ((1, "LM"), (2, "LAD"), (3, "LCX"), (4, "RCA")):
        assert f[f"ca_{name}_agatston"] == truth.territory_agatston[code]
    kept = [t for t in truth.lesions if t.detectable]
    assert f["ca_heart_lesion_count"] == len(kept)
    vv = truth.voxel_volume_mm3
    assert f["ca_heart_volume_mm3"] == pytest.approx(sum(t.voxel_count for t in kept) * vv, rel=1e-12)


def test_outside_heart_changes_nothing():
    spec = random_phantom_spec(5)
    vol, heart, _, terr, _ = generate_phantom(spec)
    hu = vol.voxels.astype(int)
    hu[~heart.inside] += 1000
    f1 = extract_calcium_features(vol, heart, terr)
    f2 = extract_calcium_features(Volume.from_array(hu, spacing=vol.geometry.spacing), heart, terr)
    assert f1 == f2
