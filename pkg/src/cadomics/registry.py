"""Column registries for the clinical, calcium-omics and fat-omics families.

The versioned text files under ``registry/`` are the normative enumeration
(one ``name<TAB>scale<TAB>unit`` line per column). The ``build_*`` helpers
regenerate them; a test keeps the two in sync.
"""

from __future__ import annotations

from functools import lru_cache
from importlib import resources

REGISTRY_VERSION = 1

TERRITORIES = ("LM", "LAD", "LCX", "RCA")

CALCIUM_HIST_EDGES = tuple(range(130, 931, 100))  # 130..930, last bin open
FAT_HU_LOW, FAT_HU_HIGH = -190, -30
FAT_BAND_EDGES = tuple(range(FAT_HU_LOW, FAT_HU_HIGH + 1, 20))
SLABS = ("Q1", "Q2", "Q3", "Q4")
RIBBONS = ("R1", "R2", "R3", "R4")

GROUP_PREFIXES = {
    "clinical": ("clin_",),
    "clinical+calcium": ("clin_", "ca_"),
    "clinical+calcium+fat": ("clin_", "ca_", "fat_"),
}


def calcium_hist_names(prefix: str) -> list[str]:
    names = []
    for lo in CALCIUM_HIST_EDGES[:-1]:
        hi = "inf" if lo == CALCIUM_HIST_EDGES[-2] else str(lo + 100)
        names.append(f"{prefix}hist_{lo}_{hi}")
    return names


def fat_band_label(lo: int) -> str:
    return f"{abs(lo)}_{abs(lo + 20)}"


TERRITORY_STATS = [
    ("lesion_count", "count"),
    ("agatston", "score"),
    ("volume_mm3", "mm3"),
    ("mass_mg", "mgEq"),
    ("diffusivity", "ratio"),
    ("hu_mean", "HU"),
    ("hu_sd", "HU"),
    ("hu_skewness", "1"),
    ("hu_kurtosis", "1"),
    ("hu_min", "HU"),
    ("hu_max", "HU"),
]
TERRITORY_LESION_STATS = [
    ("lesion_volume_mean", "mm3"),
    ("lesion_volume_max", "mm3"),
    ("lesion_mass_mean", "mgEq"),
    ("lesion_agatston_max", "score"),
    ("lesion_sphericity_mean", "1"),
    ("lesion_elongation_mean", "1"),
    ("lesion_diameter_max", "mm"),
    ("dist_to_top_mean", "mm"),
    ("dist_to_top_min", "mm"),
    ("dist_next_mean", "mm"),
    ("agatston_fraction", "ratio"),
    ("volume_fraction", "ratio"),
    ("mass_fraction", "ratio"),
]
HEART_STATS = [
    ("agatston", "score"),
    ("volume_mm3", "mm3"),
    ("mass_mg", "mgEq"),
    ("lesion_count", "count"),
    ("hu_mean", "HU"),
    ("hu_sd", "HU"),
    ("hu_skewness", "1"),
    ("hu_kurtosis", "1"),
    ("hu_min", "HU"),
    ("hu_max", "HU"),
]
HEART_TAIL = [
    ("cac_category", "ordinal"),
    ("territories_involved", "count"),
    ("diffusivity", "ratio"),
]
LESION_SUMMARY_FEATURES = [
    ("volume_mm3", "mm3"),
    ("mass_mg", "mgEq"),
    ("agatston", "score"),
    ("hu_mean", "HU"),
    ("hu_max", "HU"),
    ("max_diameter_mm", "mm"),
    ("sphericity", "1"),
    ("elongation", "1"),
    ("dist_next_mm", "mm"),
    ("dist_to_top_mm", "mm"),
]
LESION_SUMMARY_STATS = ("mean", "max", "min", "sd")

INTENSITY_STATS = [
    ("hu_mean", "HU"),
    ("hu_sd", "HU"),
    ("hu_skewness", "1"),
    ("hu_kurtosis", "1"),
    ("hu_min", "HU"),
    ("hu_max", "HU"),
    ("hu_entropy_bits", "bit"),
]

CLINICAL = [
    ("clin_male", "binary"),
    ("clin_bmi", "kg/m2"),
    ("clin_age", "years"),
    ("clin_bmi_band", "binary: 1 if BMI >= 30"),
    ("clin_age_band", "binary: 1 if age 60-75"),
    ("clin_diabetes", "binary"),
    ("clin_height_m", "m"),
    ("clin_weight_kg", "kg"),
    ("clin_smoking", "ordinal: 0 never, 1 prior, 2 current"),
    ("clin_cigarettes_per_day", "count"),
    ("clin_hypertension", "binary"),
    ("clin_total_cholesterol", "mmol/L"),
    ("clin_hdl_cholesterol", "mmol/L"),
    ("clin_chd_family_history", "binary"),
    ("clin_sbp", "mmHg"),
    ("clin_dbp", "mmHg"),
    ("clin_chest_pain_cardiac", "binary: 1 cardiac, 0 non-cardiac"),
    ("clin_antiplatelet", "binary"),
    ("clin_statin", "binary"),
    ("clin_ace_inhibitor", "binary"),
    ("clin_calcium_blocker", "binary"),
    ("clin_nitrates", "binary"),
    ("clin_betablocker", "binary"),
    ("clin_hyperlipidemia", "binary"),
]


def build_clinical() -> list[tuple[str, str, str]]:
    return [(name, "patient", unit) for name, unit in CLINICAL]


def build_calcium() -> list[tuple[str, str, str]]:
    rows = []
    for t in TERRITORIES:
        p = f"ca_{t}_"
        rows += [(p + n, "territory", u) for n, u in TERRITORY_STATS]
        rows += [(n, "territory", "count") for n in calcium_hist_names(p)]
        rows += [(p + n, "territory", u) for n, u in TERRITORY_LESION_STATS]
    rows += [("ca_heart_" + n, "heart", u) for n, u in HEART_STATS]
    rows += [(n, "heart", "count") for n in calcium_hist_names("ca_heart_")]
    rows += [("ca_heart_" + n, "heart", u) for n, u in HEART_TAIL]
    for feat, unit in LESION_SUMMARY_FEATURES:
        rows += [(f"ca_lesion_{feat}_{s}", "lesion", unit) for s in LESION_SUMMARY_STATS]
    return rows


def build_fat() -> list[tuple[str, str, str]]:
    rows = [
        ("fat_volume_mL", "morphology", "mL"),
        ("fat_axis_major_mm", "morphology", "mm"),
        ("fat_axis_mid_mm", "morphology", "mm"),
        ("fat_axis_minor_mm", "morphology", "mm"),
        ("fat_thickness_mean_mm", "morphology", "mm"),
        ("fat_surface_area_mm2", "morphology", "mm2"),
        ("fat_pericardium_volume_mL", "morphology", "mL"),
        ("fat_pericardium_fraction", "morphology", "ratio"),
    ]
    rows += [("fat_" + n, "intensity", u) for n, u in INTENSITY_STATS]
    rows += [(f"fat_hist_{fat_band_label(lo)}", "intensity", "count") for lo in FAT_BAND_EDGES[:-1]]
    rows += [(f"fat_P{q}_Vol", "spatial", "mL") for q in SLABS]
    rows += [(f"fat_P{r}_Vol", "spatial", "mL") for r in RIBBONS]
    rows += [(f"fat_P{q}{r}_Vol", "spatial", "mL") for q in SLABS for r in RIBBONS]
    rows += [(f"fat_P{q}_Vol_{fat_band_label(lo)}", "spatial", "mL") for q in SLABS for lo in FAT_BAND_EDGES[:-1]]
    rows += [(f"fat_P{r}_Vol_{fat_band_label(lo)}", "spatial", "mL") for r in RIBBONS for lo in FAT_BAND_EDGES[:-1]]
    rows += [(f"fat_P{q}_{n}", "spatial", u) for q in SLABS for n, u in INTENSITY_STATS]
    rows += [(f"fat_P{r}_{n}", "spatial", u) for r in RIBBONS for n, u in INTENSITY_STATS]
    rows += [(f"fat_P{q}{r}_hu_mean", "spatial", "HU") for q in SLABS for r in RIBBONS]
    rows += [(f"fat_P{q}{r}_hu_sd", "spatial", "HU") for q in SLABS for r in RIBBONS]
    rows += [(f"fat_P{q}_thickness_mean_mm", "spatial", "mm") for q in SLABS]
    rows += [(f"fat_P{q}_fraction", "spatial", "ratio") for q in SLABS]
    rows += [(f"fat_P{r}_fraction", "spatial", "ratio") for r in RIBBONS]
    return rows


BUILDERS = {"clinical": build_clinical, "calcium": build_calcium, "fat": build_fat}
EXPECTED_LENGTHS = {"clinical": 24, "calcium": 189, "fat": 211}


def render(family: str) -> str:
    lines = [f"# cadomics {family} registry v{REGISTRY_VERSION}", "# name\tscale\tunit"]
    lines += ["\t".join(row) for row in BUILDERS[family]()]
    return "\n".join(lines) + "\n"


def parse(text: str) -> list[tuple[str, str, str]]:
    rows = []
    version_seen = False
    for line in text.splitlines():
        if line.startswith("# cadomics"):
            version = int(line.rsplit("v", 1)[1])
            if version != REGISTRY_VERSION:
                raise ValueError(f"registry version {version} is not supported")
            version_seen = True
            continue
        if not line.strip() or line.startswith("#"):
            continue
        name, scale, unit = line.split("\t")
        rows.append((name, scale, unit))
    if not version_seen:
        raise ValueError("registry file lacks a version line")
    return rows


@lru_cache(maxsize=None)
def load(family: str) -> tuple[tuple[str, str, str], ...]:
    text = resources.files("cadomics").joinpath("registry").joinpath(f"{family}.txt").read_text()
    rows = tuple(parse(text))
    if len(rows) != EXPECTED_LENGTHS[family]:
        raise ValueError(f"{family} registry has {len(rows)} columns, expected {EXPECTED_LENGTHS[family]}")
    return rows


def names(family: str) -> list[str]:
    return [row[0] for row in load(family)]


def full_layout() -> list[str]:
    """The 424-column order: clinical, calcium, fat."""
    return names("clinical") + names("calcium") + names("fat")


def columns_for_group(columns, group: str) -> list[str]:
    if group not in GROUP_PREFIXES:
        raise ValueError(f"unknown model group {group!r}; expected one of {sorted(GROUP_PREFIXES)}")
    prefixes = GROUP_PREFIXES[group]
    return [c for c in columns if c.startswith(prefixes)]
