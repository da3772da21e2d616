"""Command-line pipeline: extract, select, train, evaluate, compare, gridsearch, phantom.

Every subcommand writes its artifacts plus ``run_summary.json`` into ``--out``.
Outputs carry no timestamps or thread counts, so re-runs with the same inputs
and seed are byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import registry
from .calcium import extract_calcium_features
from .evaluation import METRICS, auroc, auprc, curve_csv, pr_curve, repeated_cv, roc_curve
from .fat import extract_fat_features
from .gbdt import GBDTConfig, deserialize, serialize
from .phantom import CohortSpec, PhantomSpec, generate_cohort, generate_phantom, random_phantom_spec
from .shap import fit_with_early_stopping, select_features_cv
from .stats import delong_test, mcnemar_test
from .table import FeatureTable, format_real, write_text_atomic
from .volume import load_mask, load_volume, save_mask, save_volume

log = logging.getLogger("cadomics")

SUMMARY_VERSION = 1
MANIFEST_FIXED = ("patient_id", "volume", "heart_mask", "pericardium_mask", "territory_mask", "cad_rads")
CAD_RADS_LABELS = {"0": 0, "1": 0, "2": 0, "3": 0, "4A": 1, "4B": 1, "5": 1}


class PipelineError(Exception):
    pass


def cad_rads_to_label(category: str) -> int:
    """Obstructive disease (4A, 4B, 5) is 1; categories 0 to 3 are 0."""
    key = str(category).strip().upper()
    if key not in CAD_RADS_LABELS:
        raise ValueError(f"unknown CAD-RADS category {category!r}")
    return CAD_RADS_LABELS[key]


# -- config ---------------------------------------------------------------------------


DEFAULT_CONFIG = {
    "model_group": "clinical+calcium+fat",
    "gbdt": {},
    "selection": {"folds": 5, "top_k": 14},
    "evaluation": {"k": 5, "repeats": 25, "threshold": 0.5, "top_k": None},
    "extraction": {"connectivity": 26, "min_area_mm2": 1.0, "mass_calibration": 0.001},
    "grid": {"depth": [4, 6], "learning_rate": [0.01, 0.1]},
    "phantom": {"count": 3},
}


def load_config(path: str | None) -> dict:
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))
    if path is None:
        return cfg
    try:
        user = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise PipelineError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(user, dict):
        raise PipelineError("config must be a JSON object")
    base = Path(path).parent
    for key, value in user.items():
        if key != "grid" and isinstance(value, dict) and isinstance(cfg.get(key), dict):
            cfg[key].update(value)
        else:
            cfg[key] = value
    for key in ("manifest", "features", "selected_features"):
        if isinstance(cfg.get(key), str):
            cfg[key] = str((base / cfg[key]))
    if cfg["model_group"] not in registry.GROUP_PREFIXES:
        raise PipelineError(f"model_group must be one of {sorted(registry.GROUP_PREFIXES)}")
    return cfg


def gbdt_config(cfg: dict, seed: int, threads: int) -> GBDTConfig:
    # the worker count is kept out of the model settings so artifacts do not depend on it
    try:
        return GBDTConfig.from_dict({**cfg["gbdt"], "seed": seed})
    except (TypeError, ValueError) as exc:
        raise PipelineError(f"invalid gbdt settings: {exc}") from exc


def dumps(doc) -> str:
    return json.dumps(doc, indent=1, sort_keys=True, allow_nan=False) + "\n"


def jsonable(x):
    if isinstance(x, dict):
        return {k: jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [jsonable(v) for v in x]
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return None if x != x else x if abs(x) != float("inf") else repr(x)
    return x


class Run:
    """Collects outputs and per-item failures, then writes the run summary."""

    def __init__(self, command: str, out: Path, seed: int):
        self.command = command
        self.out = out
        self.seed = seed
        self.outputs: list[str] = []
        self.failures: list[dict] = []
        self.info: dict = {}
        out.mkdir(parents=True, exist_ok=True)

    def write(self, name: str, text: str) -> Path:
        path = self.out / name
        write_text_atomic(path, text)
        self.outputs.append(name)
        return path

    def fail(self, item: str, error: Exception):
        log.error("%s: %s", item, error)
        self.failures.append({"item": item, "error": f"{type(error).__name__}: {error}"})

    def finish(self) -> int:
        summary = {
            "summary": "cadomics-run",
            "version": SUMMARY_VERSION,
            "command": self.command,
            "seed": self.seed,
            "status": "ok" if not self.failures else "failed",
            "n_failures": len(self.failures),
            "failures": self.failures,
            "outputs": sorted(self.outputs),
            **jsonable(self.info),
        }
        write_text_atomic(self.out / "run_summary.json", dumps(summary))
        return 0 if not self.failures else 1


def _need(path, what: str) -> Path:
    if path is None:
        raise PipelineError(f"no {what} given (argument or config)")
    p = Path(path)
    if not p.exists():
        raise PipelineError(f"{what} {p} does not exist")
    return p


def read_features(path, cfg: dict, group: str | None = None) -> FeatureTable:
    table = FeatureTable.read_csv(_need(path, "feature table"))
    group = group or cfg["model_group"]
    if any(c.startswith(("clin_", "ca_", "fat_")) for c in table.column_names):
        table = table.select(registry.columns_for_group(table.column_names, group))
    selected = cfg.get("selected_features")
    if selected:
        names = [ln.strip() for ln in Path(selected).read_text().splitlines() if ln.strip()]
        table = table.select(names)
    return table


# -- extract ----------------------------------------------------------------------------


def read_manifest(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        if tuple(header[: len(MANIFEST_FIXED)]) != MANIFEST_FIXED:
            raise PipelineError(f"manifest header must start with {','.join(MANIFEST_FIXED)}")
        clinical = set(registry.names("clinical"))
        unknown = [c for c in header[len(MANIFEST_FIXED) :] if c not in clinical]
        if unknown:
            raise PipelineError(f"manifest has columns outside the clinical registry: {unknown}")
        rows = list(reader)
    ids = [r["patient_id"] for r in rows]
    if len(set(ids)) != len(ids):
        raise PipelineError("manifest patient ids must be unique")
    return rows


def _extract_one(row: dict, base: Path, ext: dict):
    def p(key):
        return base / row[key]

    label = cad_rads_to_label(row["cad_rads"])
    volume = load_volume(p("volume"))
    heart = load_mask(p("heart_mask"))
    pericardium = load_mask(p("pericardium_mask"))
    territory = load_mask(p("territory_mask"), "territory")
    calcium = extract_calcium_features(
        volume, heart, territory,
        connectivity=int(ext["connectivity"]),
        min_area_mm2=float(ext["min_area_mm2"]),
        mass_calibration=float(ext["mass_calibration"]),
    )
    fat = extract_fat_features(volume, pericardium)
    clinical = []
    for name in registry.names("clinical"):
        cell = (row.get(name) or "").strip()
        clinical.append(float(cell) if cell else np.nan)
    return label, clinical, list(calcium.values()), list(fat.values())


def cmd_extract(args, cfg) -> int:
    run = Run("extract", args.out, args.seed)
    manifest = _need(args.manifest or cfg.get("manifest"), "manifest")
    rows = read_manifest(manifest)
    base = manifest.parent

    def job(row):
        try:
            return _extract_one(row, base, cfg["extraction"])
        except Exception as exc:  # per-patient failure: logged and skipped
            return exc

    with ThreadPoolExecutor(max_workers=args.threads) as pool:
        results = list(pool.map(job, rows))
    ids, labels, clin, ca, fat = [], [], [], [], []
    for row, res in zip(rows, results):
        if isinstance(res, Exception):
            run.fail(row["patient_id"], res)
            continue
        ids.append(row["patient_id"])
        labels.append(res[0])
        clin.append(res[1])
        ca.append(res[2])
        fat.append(res[3])
    names = {f: registry.names(f) for f in ("clinical", "calcium", "fat")}

    def table(cols, blocks):
        X = np.hstack([np.asarray(b, dtype=np.float64).reshape(len(ids), -1) for b in blocks])
        return FeatureTable(cols, ids, np.asarray(labels, dtype=np.int8), X)

    run.write("calcium.csv", table(names["calcium"], [ca]).to_csv_text())
    run.write("fat.csv", table(names["fat"], [fat]).to_csv_text())
    run.write("features.csv", table(registry.full_layout(), [clin, ca, fat]).to_csv_text())
    run.info = {"n_patients": len(rows), "n_extracted": len(ids)}
    return run.finish()


# -- select / train ------------------------------------------------------------------------


def cmd_select(args, cfg) -> int:
    run = Run("select", args.out, args.seed)
    table = read_features(args.features or cfg.get("features"), cfg)
    sel = cfg["selection"]
    ranking = select_features_cv(table, gbdt_config(cfg, args.seed, args.threads), int(sel["folds"]), int(sel["top_k"]), seed=args.seed)
    run.write("importance.csv", ranking.to_csv_text())
    run.write("selected_features.txt", "".join(f"{n}\n" for n in ranking.selected))
    run.info = {"model_group": cfg["model_group"], "top_k": int(sel["top_k"]), "n_columns": len(table.column_names)}
    return run.finish()


def cmd_train(args, cfg) -> int:
    run = Run("train", args.out, args.seed)
    table = read_features(args.features or cfg.get("features"), cfg)
    config = gbdt_config(cfg, args.seed, args.threads)
    model = fit_with_early_stopping(table, np.arange(table.n_rows), config, args.seed)
    run.write("model.json", serialize(model))
    run.info = {"model_group": cfg["model_group"], "best_iteration": model.best_iteration, "n_rows": table.n_rows}
    return run.finish()


# -- evaluate ----------------------------------------------------------------------------------


def scores_csv(ids, labels, scores, threshold) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["patient_id", "label", "score", "pred"])
    for pid, y, s in zip(ids, labels, scores):
        w.writerow([pid, int(y), format_real(s), int(s >= threshold)])
    return buf.getvalue()


def _evaluate(table, cfg, seed, threads, gbdt: GBDTConfig):
    ev = cfg["evaluation"]
    return repeated_cv(
        table, gbdt, int(ev["k"]), int(ev["repeats"]), float(ev["threshold"]),
        master_seed=seed, top_k=ev.get("top_k"), threads=threads,
    )


def cmd_evaluate(args, cfg) -> int:
    run = Run("evaluate", args.out, args.seed)
    table = read_features(args.features or cfg.get("features"), cfg)
    report = _evaluate(table, cfg, args.seed, args.threads, gbdt_config(cfg, args.seed, args.threads))
    doc = report.to_dict()
    doc["feature_group"] = cfg["model_group"]
    scores = report.mean_scores()
    doc["mean_score_auroc"] = auroc(scores, table.labels)
    doc["mean_score_auprc"] = auprc(scores, table.labels)
    run.write("report.json", dumps(jsonable(doc)))
    run.write("roc.csv", curve_csv(roc_curve(scores, table.labels), ["threshold", "fpr", "tpr"]))
    run.write("pr.csv", curve_csv(pr_curve(scores, table.labels), ["threshold", "recall", "precision"]))
    run.write("oof_scores.csv", scores_csv(table.patient_ids, table.labels, scores, report.threshold))
    run.info = {"model_group": cfg["model_group"], "auroc_mean": report.aggregate["auroc"]["mean"]}
    return run.finish()


# -- compare --------------------------------------------------------------------------------


def read_scores(path) -> dict[str, tuple[int, float, int]]:
    out = {}
    with open(_need(path, "score file"), newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"patient_id", "label", "score", "pred"} <= set(reader.fieldnames):
            raise PipelineError(f"{path}: expected columns patient_id,label,score,pred")
        for row in reader:
            out[row["patient_id"]] = (int(row["label"]), float(row["score"]), int(row["pred"]))
    return out


def cmd_compare(args, cfg) -> int:
    run = Run("compare", args.out, args.seed)
    a = read_scores(args.scores_a)
    b = read_scores(args.scores_b)
    if set(a) != set(b):
        raise PipelineError("score files cover different patients")
    ids = sorted(a)
    if any(a[i][0] != b[i][0] for i in ids):
        raise PipelineError("score files disagree on labels")
    labels = np.array([a[i][0] for i in ids])
    sa = np.array([a[i][1] for i in ids])
    sb = np.array([b[i][1] for i in ids])
    dl = delong_test(sa, sb, labels)
    mc = mcnemar_test([a[i][2] for i in ids], [b[i][2] for i in ids], labels)
    pos, neg = labels == 1, labels == 0
    pa = np.array([a[i][2] for i in ids])
    pb = np.array([b[i][2] for i in ids])
    doc = {
        "report": "cadomics-comparison",
        "version": 1,
        "n_rows": len(ids),
        "delong": {"auc_a": dl.auc_a, "auc_b": dl.auc_b, "z": dl.z, "p": dl.p, "variance": dl.variance},
        "mcnemar_all": vars(mc),
        # sensitivity compares positives only, specificity negatives only
        "mcnemar_sensitivity": vars(mcnemar_test(pa[pos], pb[pos], labels[pos])),
        "mcnemar_specificity": vars(mcnemar_test(pa[neg], pb[neg], labels[neg])),
    }
    run.write("compare.json", dumps(jsonable(doc)))
    return run.finish()


# -- gridsearch ------------------------------------------------------------------------------


def cmd_gridsearch(args, cfg) -> int:
    run = Run("gridsearch", args.out, args.seed)
    table = read_features(args.features or cfg.get("features"), cfg)
    grid = cfg["grid"]
    keys = sorted(grid)
    if not keys or any(not isinstance(grid[k], list) or not grid[k] for k in keys):
        raise PipelineError("grid must map setting names to nonempty lists")
    rows = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        params = dict(zip(keys, combo))
        try:
            config = GBDTConfig.from_dict({**cfg["gbdt"], **params, "seed": args.seed})
        except (TypeError, ValueError) as exc:
            raise PipelineError(f"invalid grid point {params}: {exc}") from exc
        report = _evaluate(table, cfg, args.seed, args.threads, config)
        rows.append((params, config, report.aggregate))
    best = min(
        range(len(rows)),
        key=lambda i: (-(rows[i][2]["auroc"]["mean"] or 0.0), rows[i][1].iterations, rows[i][1].depth, i),
    )
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([*keys, *(f"{m}_{s}" for m in METRICS for s in ("mean", "sd")), "best"])
    for i, (params, _, agg) in enumerate(rows):
        cells = [params[k] for k in keys]
        for m in METRICS:
            for s in ("mean", "sd"):
                v = agg[m][s]
                cells.append("" if v is None else format_real(v))
        w.writerow([*cells, int(i == best)])
    run.write("grid.csv", buf.getvalue())
    run.write("best_config.json", dumps({"config": "cadomics-best-gbdt", "version": 1, "gbdt": rows[best][1].to_dict(), "grid_point": rows[best][0]}))
    run.info = {"n_points": len(rows)}
    return run.finish()


# -- phantom --------------------------------------------------------------------------------------


def cmd_phantom(args, cfg) -> int:
    """Writes phantom volumes, masks, a manifest and ground truth; optionally a synthetic cohort."""
    run = Run("phantom", args.out, args.seed)
    pc = cfg["phantom"]
    rng = np.random.default_rng(args.seed)
    specs = [PhantomSpec.from_dict(s) for s in pc.get("specs", [])]
    specs += [random_phantom_spec(int(rng.integers(0, 2**31))) for _ in range(int(pc.get("count", 0)))]
    cad = list(CAD_RADS_LABELS)
    manifest = io.StringIO()
    w = csv.writer(manifest, lineterminator="\n")
    w.writerow([*MANIFEST_FIXED, "clin_male", "clin_age", "clin_bmi"])
    truths = {}
    for i, spec in enumerate(specs):
        pid = f"PH{i + 1:04d}"
        volume, heart, peri, terr, truth = generate_phantom(spec)
        d = args.out / "phantoms" / pid
        save_volume(volume, d / "ct")
        save_mask(heart, d / "heart")
        save_mask(peri, d / "pericardium")
        save_mask(terr, d / "territory")
        for name in ("ct", "heart", "pericardium", "territory"):
            run.outputs += [f"phantoms/{pid}/{name}.json", f"phantoms/{pid}/{name}.raw"]
        w.writerow([
            pid, f"phantoms/{pid}/ct.json", f"phantoms/{pid}/heart.json", f"phantoms/{pid}/pericardium.json",
            f"phantoms/{pid}/territory.json", cad[int(rng.integers(0, len(cad)))],
            int(rng.integers(0, 2)), int(rng.integers(40, 80)), format_real(round(float(rng.uniform(18, 40)), 1)),
        ])
        truths[pid] = {
            "spec": spec.to_dict(),
            "total_agatston": truth.total_agatston,
            "territory_agatston": {str(k): v for k, v in truth.territory_agatston.items()},
            "fat_volume_mL": truth.fat_volume_mL,
            "fat_slab_counts": truth.fat_slab_counts,
            "lesions": [vars(le) for le in truth.lesions],
        }
    run.write("manifest.csv", manifest.getvalue())
    run.write("ground_truth.json", dumps(jsonable({"ground_truth": "cadomics-phantoms", "version": 1, "phantoms": truths})))
    if "cohort" in pc:
        spec = CohortSpec.from_dict({"seed": args.seed, **pc["cohort"]})
        run.write("cohort.csv", generate_cohort(spec).to_csv_text())
    run.info = {"n_phantoms": len(specs)}
    return run.finish()


# -- entry point -----------------------------------------------------------------------------------


COMMANDS = {
    "extract": cmd_extract,
    "select": cmd_select,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
    "gridsearch": cmd_gridsearch,
    "phantom": cmd_phantom,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON pipeline config")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed (default 0)")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker threads (default 1)")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory (default ./out)")
    parser = argparse.ArgumentParser(prog="cadomics", description=__doc__.splitlines()[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("extract", parents=[common], help="calcium and fat features from a manifest")
    p.add_argument("manifest", nargs="?")
    for name, text in (
        ("select", "rank features by cross-validated mean |SHAP|"),
        ("train", "fit one model on a feature table"),
        ("evaluate", "repeated stratified cross-validation"),
        ("gridsearch", "cross-validate every grid point"),
    ):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("features", nargs="?")
        p.add_argument("--group", choices=sorted(registry.GROUP_PREFIXES), help="model column group")
    p = sub.add_parser("compare", parents=[common], help="DeLong and McNemar between two score files")
    p.add_argument("scores_a")
    p.add_argument("scores_b")
    sub.add_parser("phantom", parents=[common], help="generate phantom volumes and cohorts")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    args.config = getattr(args, "config", None)
    args.seed = getattr(args, "seed", 0)
    args.threads = getattr(args, "threads", 1)
    args.out = Path(getattr(args, "out", "out"))
    for name in ("manifest", "features"):
        if not hasattr(args, name):
            setattr(args, name, None)
    try:
        if args.threads < 1:
            raise PipelineError("--threads must be >= 1")
        cfg = load_config(args.config)
        if getattr(args, "group", None):
            cfg["model_group"] = args.group
        return COMMANDS[args.command](args, cfg)
    except (PipelineError, ValueError, OSError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
