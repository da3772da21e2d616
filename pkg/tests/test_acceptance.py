"""End-to-end acceptance checks, one test per criterion.

Each test records a short detail string; the conftest prints one PASS/FAIL
line per criterion in the terminal summary.
"""

from __future__ import annotations

import csv
import json
import shutil
import time

import numpy as np
import pytest

from cadomics import registry
from cadomics.calcium import cac_category, extract_calcium_features
from cadomics.cli import cad_rads_to_label, main
from cadomics.evaluation import auprc, auroc, repeated_cv
from cadomics.fat import compute_fat_features, extract_fat_features
from cadomics.gbdt import GBDTConfig, fit, route
from cadomics.phantom import CohortSpec, ablation_cohort, generate_cohort, generate_phantom, random_phantom_spec
from cadomics.shap import brute_force_shap, select_features_cv, tree_expected_value, tree_shap, tree_shap_single
from cadomics.stats import auc_variance, delong_test, mcnemar_from_counts
from cadomics.table import FeatureTable
from cadomics.volume import Volume, load_mask, load_volume, save_volume

from helpers import random_rows, random_tree

PHANTOM_SEEDS = range(1000, 1050)
PHANTOM_TIME: list[float] = []
DEFAULT = GBDTConfig()  # 300 iterations, lr 0.01, depth 6, l2 5, rsm 0.75, subsample 0.6, auto weights


@pytest.fixture(scope="module")
def phantoms():
    start = time.perf_counter()
    made = [generate_phantom(random_phantom_spec(s)) for s in PHANTOM_SEEDS]
    PHANTOM_TIME.append(time.perf_counter() - start)
    return made


@pytest.fixture(scope="module")
def planted():
    return generate_cohort(CohortSpec(seed=11))


def test_criterion_01_agatston_oracle(phantoms, record_property):
    start = time.perf_counter()
    maxima = set()
    for volume, heart, _, territory, truth in phantoms:
        feats = extract_calcium_features(volume, heart, territory)
        assert feats["ca_heart_agatston"] == truth.total_agatston
        maxima.update(lt.hu_max for lt in truth.lesions if lt.detectable)
    elapsed = time.perf_counter() - start + PHANTOM_TIME[0]
    assert {199, 200, 399, 400} <= maxima
    assert elapsed < 60
    record_property("detail", f"50 phantoms exact, band-edge maxima present, {elapsed:.1f}s")


def test_criterion_02_conservation(phantoms, record_property):
    for volume, heart, peri, territory, truth in phantoms:
        fs = compute_fat_features(volume, peri)
        total = fs.total_count
        assert total == truth.fat_count
        assert int(fs.slab_counts.sum()) == int(fs.ribbon_counts.sum()) == int(fs.slab_band_counts.sum()) == total
        assert fs.slab_counts.tolist() == truth.fat_slab_counts
        feats = extract_fat_features(volume, peri)
        vv = fs.voxel_volume_mm3
        for q in range(4):
            assert feats[f"fat_PQ{q + 1}_Vol"] == fs.slab_counts[q] * vv / 1000.0
            assert feats[f"fat_PR{q + 1}_Vol"] == fs.ribbon_counts[q] * vv / 1000.0
        ca = extract_calcium_features(volume, heart, territory)
        terr_sum = sum(ca[f"ca_{t}_agatston"] for t in registry.TERRITORIES)
        assert terr_sum == ca["ca_heart_agatston"] == truth.total_agatston
    record_property("detail", "slab = ribbon = slab x band = total on 50 phantoms; territory sums exact")


def _extract_csvs(root, out):
    assert main(["--out", str(out), "extract", str(root / "manifest.csv")]) == 0
    return {n: (out / n).read_bytes() for n in ("calcium.csv", "fat.csv", "features.csv")}


def test_criterion_03_mask_isolation(tmp_path, record_property):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"phantom": {"count": 6}}))
    assert main(["--config", str(cfg), "--seed", "5", "--out", str(tmp_path / "ph"), "phantom"]) == 0
    base = _extract_csvs(tmp_path / "ph", tmp_path / "a")
    shutil.copytree(tmp_path / "ph", tmp_path / "pert")
    rng = np.random.default_rng(0)
    with open(tmp_path / "pert" / "manifest.csv") as fh:
        for row in csv.DictReader(fh):
            d = tmp_path / "pert"
            vol = load_volume(d / row["volume"])
            inside = load_mask(d / row["heart_mask"]).inside | load_mask(d / row["pericardium_mask"]).inside
            hu = vol.voxels.astype(np.int32)
            shift = rng.choice([-500, 500], size=hu.shape)
            hu = np.where(inside, hu, np.clip(hu + shift, -1024, 4095))
            save_volume(Volume.from_array(hu.astype(np.int16), vol.spacing, vol.origin), d / row["volume"][: -len(".json")])
    pert = _extract_csvs(tmp_path / "pert", tmp_path / "b")
    assert base == pert
    record_property("detail", "6 phantoms, +-500 HU outside masks, calcium/fat/features CSVs byte-equal")


def test_criterion_04_shap_correctness(record_property):
    start = time.perf_counter()
    worst = 0.0
    worst_local = 0.0
    for s in range(200):
        rng = np.random.default_rng(s)
        n_features = 6
        tree = random_tree(rng, n_features, int(rng.integers(1, 5)), missing_prob=0.1)
        X = random_rows(rng, 1000, n_features, missing_prob=0.1)
        fast = tree_shap_single(tree, X, n_features)
        slow = brute_force_shap(tree, X, n_features)
        worst = max(worst, float(np.max(np.abs(fast - slow.values))))
        base = tree_expected_value(tree, tree.value)
        out = tree.value[route(tree, X)]
        worst_local = max(worst_local, float(np.max(np.abs(base + fast.sum(axis=1) - out))))
    # local accuracy on a trained ensemble as well
    table = generate_cohort(CohortSpec(n_rows=400, n_features=8, seed=3, missing_rate=0.05))
    model = fit(table, None, GBDTConfig(iterations=60, learning_rate=0.1, depth=4, early_stopping=False))
    sv = tree_shap(model, table)
    worst_local = max(worst_local, float(np.max(np.abs(sv.base_value + sv.values.sum(axis=1) - model.predict_margin(table)))))
    elapsed = time.perf_counter() - start
    assert worst < 1e-9 and worst_local < 1e-9 and elapsed < 120
    record_property("detail", f"max |fast - brute| {worst:.1e}, max local gap {worst_local:.1e}, {elapsed:.1f}s")


@pytest.mark.slow
def test_criterion_05_learning_sanity(planted, record_property):
    start = time.perf_counter()
    assert planted.n_rows == 1324 and len(planted.column_names) == 30
    report = repeated_cv(planted, DEFAULT, k=5, repeats=25, master_seed=0)
    mean_auc = report.aggregate["auroc"]["mean"]
    ranking = select_features_cv(planted, DEFAULT, 5, 3, seed=0)
    elapsed = time.perf_counter() - start
    record_property("detail", f"mean AUROC {mean_auc:.3f}, top3 {ranking.selected}, {elapsed:.0f}s")
    assert mean_auc >= 0.90
    assert set(ranking.selected) == {"f000", "f001", "f002"}
    assert elapsed < 600


@pytest.mark.slow
def test_criterion_06_null_control(planted, record_property):
    rng = np.random.default_rng(99)
    null = FeatureTable(planted.column_names, planted.patient_ids, rng.permutation(planted.labels), planted.X)
    report = repeated_cv(null, DEFAULT, k=5, repeats=25, master_seed=0)
    pi = float(np.mean(null.labels))
    chance = {m: [] for m in ("sensitivity", "specificity", "accuracy", "f1", "auroc", "auprc")}
    for r in report.repeats:
        q = r.predicted_positive_rate
        chance["sensitivity"].append(q)
        chance["specificity"].append(1 - q)
        chance["accuracy"].append(pi * q + (1 - pi) * (1 - q))
        chance["f1"].append(2 * pi * q / (pi + q) if pi + q > 0 else 0.0)
        chance["auroc"].append(0.5)
        chance["auprc"].append(pi)
    mean_auc = report.aggregate["auroc"]["mean"]
    excess = {}
    for m, vals in chance.items():
        agg = report.aggregate[m]
        excess[m] = agg["mean"] - (np.mean(vals) + 3 * agg["sd"])
    record_property("detail", f"mean AUROC {mean_auc:.3f}; max excess over chance+3sd {max(excess.values()):.3f}")
    assert 0.45 <= mean_auc <= 0.55
    assert all(v <= 0 for v in excess.values()), excess


def test_criterion_07_statistics_oracles(record_property):
    rng = np.random.default_rng(7)
    y = np.r_[np.ones(80, int), np.zeros(120, int)]
    a = y * 1.0 + rng.normal(size=200)
    b = a + rng.normal(scale=0.8, size=200)
    assert delong_test(a, a, y).p == 1.0
    # stratified bootstrap keeps class counts fixed, like the placement-value estimator
    pos, neg = np.flatnonzero(y == 1), np.flatnonzero(y == 0)
    boot_auc, boot_diff = [], []
    for _ in range(10_000):
        idx = np.r_[rng.choice(pos, pos.size), rng.choice(neg, neg.size)]
        aa = auroc(a[idx], y[idx])
        boot_auc.append(aa)
        boot_diff.append(aa - auroc(b[idx], y[idx]))
    ratio_auc = auc_variance(a, y) / np.var(boot_auc, ddof=1)
    ratio_diff = delong_test(a, b, y).variance / np.var(boot_diff, ddof=1)
    assert 0.8 <= ratio_auc <= 1.2 and 0.8 <= ratio_diff <= 1.2
    assert mcnemar_from_counts(5, 15).statistic == 4.05
    assert auroc([0.8, 0.4, 0.6, 0.2], [1, 1, 0, 0]) == 0.75
    assert abs(auprc([0.9, 0.5, 0.3], [1, 0, 1]) - 0.8333) < 1e-4
    record_property("detail", f"DeLong/bootstrap variance ratio {ratio_auc:.3f} (AUC), {ratio_diff:.3f} (difference)")


def _pipeline(root, threads):
    root.mkdir(parents=True, exist_ok=True)
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps({
        "phantom": {"count": 3, "cohort": {"n_rows": 240, "n_features": 8}},
        "gbdt": {"iterations": 40, "learning_rate": 0.1},
        "evaluation": {"repeats": 3},
        "selection": {"top_k": 4},
        "grid": {"depth": [3, 4], "learning_rate": [0.05, 0.1]},
    }))
    common = ["--config", str(cfg), "--seed", "17", "--threads", str(threads)]
    out = root / f"t{threads}"
    cohort = str(out / "ph" / "cohort.csv")
    steps = [
        ("ph", ["phantom"]),
        ("ex", ["extract", str(out / "ph" / "manifest.csv")]),
        ("se", ["select", cohort]),
        ("tr", ["train", cohort]),
        ("ev", ["evaluate", cohort]),
        ("gs", ["gridsearch", cohort]),
    ]
    for name, args in steps:
        assert main([*common, "--out", str(out / name), *args]) == 0
    assert main([*common, "--seed", "18", "--out", str(out / "ev2"), "evaluate", cohort]) == 0
    assert main([*common, "--out", str(out / "co"), "compare", str(out / "ev" / "oof_scores.csv"), str(out / "ev2" / "oof_scores.csv")]) == 0
    return {str(p.relative_to(out)): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}


def test_criterion_08_determinism(tmp_path, record_property):
    one = _pipeline(tmp_path, 1)
    eight = _pipeline(tmp_path, 8)
    again = _pipeline(tmp_path / "rerun", 1)
    assert one.keys() == eight.keys() == again.keys()
    differing = [k for k in one if not (one[k] == eight[k] == again[k])]
    assert not differing, differing
    record_property("detail", f"{len(one)} artifacts across 7 subcommands byte-identical at threads 1, 8 and a rerun")


def test_criterion_09_labels_and_bands(record_property):
    assert {c: cad_rads_to_label(c) for c in ("0", "1", "2", "3", "4A", "4B", "5")} == {
        "0": 0, "1": 0, "2": 0, "3": 0, "4A": 1, "4B": 1, "5": 1,
    }
    bands = [cac_category(s) for s in (0, 1, 100, 101, 400)]
    assert bands == ["absent", "mild", "mild", "moderate", "severe"]
    record_property("detail", "seven CAD-RADS categories; bands " + ", ".join(bands))


@pytest.mark.slow
def test_criterion_10_ablation_direction(record_property):
    table = ablation_cohort(n_rows=600, seed=21)
    means = {}
    for group in ("clinical", "clinical+calcium", "clinical+calcium+fat"):
        means[group] = repeated_cv(table, DEFAULT, k=5, repeats=25, feature_group=group, master_seed=0).aggregate["auroc"]["mean"]
    a, b, c = means.values()
    record_property("detail", f"AUROC clinical {a:.3f} < +calcium {b:.3f} < +fat {c:.3f}")
    assert b - a >= 0.03 and c - b >= 0.03
