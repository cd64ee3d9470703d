"""Command-line entry point: ``ecg-icd {build,train,eval,compare,icd,synth}``.

Every command reads one TOML run configuration, writes its outputs under
``<paths.out_dir>/<name>/`` and snapshots the resolved configuration there
as ``config.toml``. Wall-clock information goes to ``metadata.json`` only,
so all other outputs are byte-identical across re-runs with the same seed.

Exit codes: 0 success, 1 validation or data error, 2 I/O or configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import pandas as pd

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
import tomli_w

from . import cohort, dataset, evaluation, icd
from .exceptions import ConfigError, DataError, EcgIcdError, LabelSetMismatch
from .models.checkpoint import ModelCheckpoint
from .models.config import ModelConfig, preset
from .signal import TARGET_FS, load_signal, preprocess, write_ecg1
from .trainer import TrainConfig, train

logger = logging.getLogger("ecg_icd")

EXIT_OK, EXIT_DATA, EXIT_IO = 0, 1, 2


# -- configuration -------------------------------------------------------------------

@dataclass(frozen=True)
class PathsConfig:
    records: str = ""
    edstays: str = ""
    admissions: str = ""
    ed_diagnoses: str = ""
    hosp_diagnoses: str = ""
    mapping: str = ""
    descriptions: str = ""
    out_dir: str = "run"


@dataclass(frozen=True)
class BuildSection:
    threshold: int = 2000
    strict: bool = False
    antialias: bool = False
    n_samples: int = 1000


@dataclass(frozen=True)
class EvalSection:
    n_boot: int = 1000
    alpha: float = 0.05
    method: str = "percentile"
    coverage_above: tuple = (0.9, 0.8)
    coverage_below: tuple = (0.7,)
    cross_scenarios: bool = False
    mcc_top: int = 50
    batch_size: int = 256


_MODEL_DERIVED = {"family", "in_leads", "n_labels", "input_len", "seed"}
_TRAIN_DERIVED = {"seed", "threads"}


@dataclass(frozen=True)
class RunConfig:
    name: str = "default"
    scenario: str = "T(ED2ALL)-E(ED2ALL)"
    seed: int = 0
    threads: int = 1
    paths: PathsConfig = field(default_factory=PathsConfig)
    build: BuildSection = field(default_factory=BuildSection)
    model: dict = field(default_factory=lambda: {"family": "S4", "preset": "desk"})
    train: dict = field(default_factory=dict)
    eval: EvalSection = field(default_factory=EvalSection)

    @property
    def run_dir(self) -> Path:
        return Path(self.paths.out_dir) / self.name

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            with open(path, "rb") as fh:
                doc = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: invalid TOML: {exc}") from None
        return cls.from_dict(doc, base=path.parent)

    @classmethod
    def from_dict(cls, doc: dict, base: Path | None = None) -> "RunConfig":
        doc = dict(doc)
        _reject_unknown(doc, {f.name for f in fields(cls)}, "top level")
        paths = _section(PathsConfig, doc.pop("paths", {}), "paths")
        if base is not None:
            resolved = {f.name: _resolve(getattr(paths, f.name), base) for f in fields(PathsConfig)}
            paths = PathsConfig(**resolved)
        build = _section(BuildSection, doc.pop("build", {}), "build")
        ev = doc.pop("eval", {})
        ev = {k: tuple(v) if isinstance(v, list) else v for k, v in ev.items()}
        ev = _section(EvalSection, ev, "eval")
        if ev.method not in ("percentile", "basic"):
            raise ConfigError("eval.method must be 'percentile' or 'basic'")
        model = dict(doc.pop("model", {}))
        model.setdefault("family", "S4")
        model.setdefault("preset", "desk")
        _reject_unknown(model, ({f.name for f in fields(ModelConfig)} - _MODEL_DERIVED) | {"family", "preset"},
                        "model")
        train_ = dict(doc.pop("train", {}))
        _reject_unknown(train_, {f.name for f in fields(TrainConfig)} - _TRAIN_DERIVED, "train")
        cfg = cls(paths=paths, build=build, model=model, train=train_, eval=ev, **doc)
        try:
            dataset.ScenarioSpec.parse(cfg.scenario)
        except DataError as exc:
            raise ConfigError(str(exc)) from None
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eval"] = {k: list(v) if isinstance(v, tuple) else v for k, v in d["eval"].items()}
        d["train"] = {k: list(v) if isinstance(v, tuple) else v for k, v in d["train"].items()}
        return d

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def model_config(self, in_leads: int, n_labels: int) -> ModelConfig:
        m = dict(self.model)
        family, name = m.pop("family"), m.pop("preset")
        if "stage_depths" in m:
            m["stage_depths"] = tuple(m["stage_depths"])
        try:
            return preset(family, name, in_leads=in_leads, n_labels=n_labels,
                          input_len=self.train_config().crop_len, seed=self.seed, **m)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"model: {exc}") from None

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(**{**self.train, "seed": self.seed, "threads": self.threads})
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"train: {exc}") from None


def _reject_unknown(d: dict, known: set, where: str):
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def _section(cls, d, where):
    if not isinstance(d, dict):
        raise ConfigError(f"[{where}] must be a table")
    _reject_unknown(d, {f.name for f in fields(cls)}, where)
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"[{where}]: {exc}") from None


def _resolve(p: str, base: Path) -> str:
    if not p:
        return p
    q = Path(p)
    return str(q if q.is_absolute() else (base / q).resolve())


# -- shared helpers ------------------------------------------------------------------

def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _snapshot(cfg: RunConfig, command: str, started: float, extra: dict | None = None) -> None:
    run = cfg.run_dir
    run.mkdir(parents=True, exist_ok=True)
    (run / "config.toml").write_text(cfg.to_toml(), encoding="utf-8")
    meta_path = run / "metadata.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    meta[command] = {"finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
                     "wall_s": round(time.time() - started, 3), **(extra or {})}
    _write_json(meta_path, meta)


def _require_file(p: str, key: str) -> Path:
    if not p:
        raise ConfigError(f"paths.{key} is not set in the config")
    path = Path(p)
    if not path.is_file():
        raise ConfigError(f"{key} file not found: {path} (check paths.{key} in the config)")
    return path


def _with_context(path, fn, *args, **kwargs):
    """Run a loader and prefix data errors with the offending file."""
    try:
        return fn(*args, **kwargs)
    except DataError as exc:
        raise type(exc)(f"{path}: {exc}") from exc
    except (ValueError, KeyError, pd.errors.ParserError) as exc:
        raise DataError(f"{path}: {exc}") from exc


# -- build ---------------------------------------------------------------------------------

def _subset_stats(recs: pd.DataFrame, codes: dict) -> dict:
    if recs.empty:
        return {"samples": 0, "patients": 0}
    per_patient = recs.groupby("subject_id")["record_id"].count()
    union: dict = {}
    for sid, rid in zip(recs["subject_id"], recs["record_id"]):
        union.setdefault(sid, set()).update(codes[rid])
    return {
        "samples": int(len(recs)),
        "patients": int(recs["subject_id"].nunique()),
        "sites": {k: int(v) for k, v in sorted(Counter(recs["site"]).items())},
        "ecg_per_patient_median": float(np.median(per_patient.to_numpy())),
        "ecg_per_patient_max": int(per_patient.max()),
        "codes_per_patient_median": float(np.median([len(v) for v in union.values()])),
        "ratio_ed_statements": float(np.mean(recs["label_source"] == cohort.ED)),
    }


def build_stats(ds: dataset.LabeledDataset, result: cohort.CohortResult, n_in: int,
                all_missing: int) -> dict:
    recs = ds.records
    codes = {rid: sorted(result.diagnoses[rid].codes) for rid in recs["record_id"]}
    counts = ds.column_counts()
    chapters: dict = {}
    for code, n in zip(ds.label_set.codes, counts):
        ch = chapters.setdefault(icd.chapter_of(code).id, {"labels": 0, "annotations": 0})
        ch["labels"] += 1
        ch["annotations"] += int(n)
    fold_patients = recs.groupby("fold")["subject_id"].nunique()
    return {
        "records_in": int(n_in),
        "samples": int(len(recs)),
        "patients": int(recs["subject_id"].nunique()),
        "n_labels": len(ds.label_set),
        "threshold": ds.label_set.threshold,
        "discards": dict(sorted(result.discards.items())),
        "skipped_codes": dict(sorted(result.skipped_codes.items())),
        "all_missing_leads": int(all_missing),
        "zero_rows": int(ds.zero_rows.sum()),
        "subsets": {
            dataset.ALL: _subset_stats(recs, codes),
            cohort.ED: _subset_stats(recs[recs["site"] == cohort.ED], codes),
        },
        "fold_patients": [int(fold_patients.get(f, 0)) for f in range(1, dataset.N_FOLDS + 1)],
        "chapters": {k: chapters[k] for k in sorted(chapters, key=icd.chapter_sort_key)},
    }


def cmd_build(cfg: RunConfig) -> dict:
    p = cfg.paths
    paths = {k: _require_file(getattr(p, k), k) for k in
             ("records", "edstays", "admissions", "ed_diagnoses", "hosp_diagnoses", "mapping")}
    mapping = _with_context(paths["mapping"], icd.MappingTable.load, paths["mapping"])
    records = _with_context(paths["records"], pd.read_csv, paths["records"], dtype={"record_id": str})
    _with_context(paths["records"], cohort._require, records, ["record_id", "subject_id", "ecg_time", "path"],
                  "record manifest")
    ed_stays = _with_context(paths["edstays"], cohort.load_ed_stays, paths["edstays"])
    admissions = _with_context(paths["admissions"], cohort.load_admissions, paths["admissions"])
    ed_dx = _with_context(paths["ed_diagnoses"], cohort.load_diagnoses, paths["ed_diagnoses"])
    hosp_dx = _with_context(paths["hosp_diagnoses"], cohort.load_diagnoses, paths["hosp_diagnoses"])
    result = _with_context(paths["records"], cohort.link_cohort, records, ed_stays, admissions, ed_dx, hosp_dx,
                           mapping, cfg.build.strict)
    if not result.diagnoses:
        raise DataError("no record could be linked to a diagnosis set")
    label_set = icd.select_label_set(icd.count_codes(d.codes for d in result.diagnoses.values()),
                                     cfg.build.threshold)

    kept = records.assign(record_id=records["record_id"].astype(str))
    kept = kept[kept["record_id"].isin(result.diagnoses)].sort_values("record_id", kind="mergesort")
    kept = kept.reset_index(drop=True)
    links = [result.linkages[r] for r in kept["record_id"]]
    kept["site"] = [lk.site for lk in links]
    kept["ed_stay"] = pd.array([lk.ed_stay for lk in links], dtype="Int64")
    kept["hadm_id"] = pd.array([lk.hosp_admission for lk in links], dtype="Int64")
    folds = dataset.assign_folds(kept["subject_id"].astype(int).unique(), cfg.seed)
    kept["fold"] = [folds[int(s)] for s in kept["subject_id"]]

    run = cfg.run_dir
    (run / "signals").mkdir(parents=True, exist_ok=True)
    base = paths["records"].parent
    fs_col = kept["fs"] if "fs" in kept else [None] * len(kept)

    def prep(args):
        rid, rel, fs = args
        src = base / rel
        raw = _with_context(src, load_signal, src, None if fs is None or pd.isna(fs) else float(fs))
        clean = _with_context(src, preprocess, raw, antialias=cfg.build.antialias)
        if clean.n_samples != cfg.build.n_samples:
            raise DataError(f"{src}: {clean.n_samples} samples at {TARGET_FS:g} Hz, "
                            f"expected {cfg.build.n_samples}")
        write_ecg1(run / "signals" / f"{rid}.ecg1", clean.samples, TARGET_FS)
        return clean.samples.astype(np.float32), len(clean.all_missing)

    jobs = list(zip(kept["record_id"], kept["path"], fs_col))
    with ThreadPoolExecutor(max_workers=max(1, cfg.threads)) as pool:
        out = list(pool.map(prep, jobs))
    X = np.stack([o[0] for o in out])
    all_missing = sum(o[1] for o in out)

    ds = dataset.build_matrix(kept, result.diagnoses, label_set, X)
    signal_paths = {rid: f"signals/{rid}.ecg1" for rid in kept["record_id"]}
    dataset.save_manifest(ds, run / "manifest.json", result.diagnoses, signal_paths,
                          extra={"seed": cfg.seed, "threshold": cfg.build.threshold,
                                 "label_set_fingerprint": label_set.fingerprint()})
    folds.to_csv(run / "folds.csv")
    _write_json(run / "label_set.json", label_set.to_dict())
    stats = build_stats(ds, result, len(records), all_missing)
    _write_json(run / "stats.json", stats)
    print(f"built {stats['samples']} samples from {stats['patients']} patients, "
          f"{stats['n_labels']} labels (threshold {cfg.build.threshold}) -> {run}")
    return stats


# -- train ---------------------------------------------------------------------------------

def _load_dataset(cfg: RunConfig, signals: bool = True) -> dataset.LabeledDataset:
    path = cfg.run_dir / "manifest.json"
    if not path.is_file():
        raise ConfigError(f"dataset manifest not found: {path} (run `ecg-icd build` first)")
    return dataset.load_manifest(path, load_signals=signals)


def cmd_train(cfg: RunConfig) -> ModelCheckpoint:
    ds = _load_dataset(cfg)
    if not ds.has_signals:
        raise DataError("manifest has no cached signals")
    model_cfg = cfg.model_config(ds.X.shape[1], len(ds.label_set))
    tc = cfg.train_config()
    run = cfg.run_dir
    result = train(model_cfg, tc, ds, cfg.scenario, log_path=run / "train_log.jsonl")
    result.checkpoint.save(run / "checkpoint.bin")
    ck = result.checkpoint
    val = "undefined" if ck.val_macro_auroc is None else f"{ck.val_macro_auroc:.4f}"
    print(f"selected epoch {ck.epoch}, validation macro AUROC {val} -> {run / 'checkpoint.bin'}")
    return ck


# -- eval / compare ---------------------------------------------------------------------------

def _eval_set(ds, scenario, phase="eval"):
    return dataset.apply_scenario(dataset.eval_view(ds.folds(dataset.TEST_FOLD)), scenario, phase)


def _load_checkpoint(path: Path, ds) -> ModelCheckpoint:
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path} (run `ecg-icd train` first)")
    ck = ModelCheckpoint.load(path)
    want = ds.label_set.fingerprint()
    got = ck.metadata.get("label_set")
    if got != want or ck.config.n_labels != len(ds.label_set):
        raise LabelSetMismatch(f"checkpoint {path} was trained on label set {got}, manifest has {want}")
    return ck


def _scores(ck: ModelCheckpoint | None, view, cfg: RunConfig, scores_path=None) -> np.ndarray:
    if scores_path is not None:
        P = np.load(scores_path)
        if P.shape != (len(view), len(view.label_set)):
            raise DataError(f"{scores_path}: scores shape {P.shape}, expected {(len(view), len(view.label_set))}")
        return P.astype(np.float64)
    tc = ck.metadata.get("train_config", {})
    model = ck.build()
    return evaluation.crop_average(model, view.X, tc.get("crop_len", ck.config.input_len),
                                   tc.get("n_eval_crops", 4), cfg.eval.batch_size)


def _fmt_thr(t: float) -> str:
    return f"{t:g}"


def cmd_eval(cfg: RunConfig, checkpoint=None, scores=None) -> evaluation.EvalReport:
    ds = _load_dataset(cfg, signals=scores is None)
    spec = dataset.ScenarioSpec.parse(cfg.scenario)
    view = _eval_set(ds, spec)
    if len(view) == 0:
        raise DataError(f"no test records for {spec}")
    ck = None if scores is not None else _load_checkpoint(Path(checkpoint or cfg.run_dir / "checkpoint.bin"), ds)
    P = _scores(ck, view, cfg, scores)
    descriptions = icd.load_descriptions(cfg.paths.descriptions or None)
    ev = cfg.eval
    report = evaluation.evaluate(P, view.Y, ds.label_set.codes, ev.n_boot, cfg.seed, ev.alpha,
                                 cfg.threads, ev.method, descriptions, str(spec))
    run = cfg.run_dir
    tables = run / "tables"
    tables.mkdir(parents=True, exist_ok=True)
    report.to_json(run / "report.json")
    report.to_csv(run / "report.csv")
    np.save(run / "scores.npy", P)
    for t in ev.coverage_above:
        rows = evaluation.coverage_table(report, t, "above", descriptions, only_covered=True)
        evaluation.coverage_csv(rows, tables / f"coverage_above_{_fmt_thr(t)}.csv")
    for t in ev.coverage_below:
        rows = evaluation.coverage_table(report, t, "below", descriptions, only_covered=True)
        evaluation.coverage_csv(rows, tables / f"coverage_below_{_fmt_thr(t)}.csv")
    chap = evaluation.chapter_macro_auroc(report)
    pd.DataFrame(chap, columns=["chapter", "macro_auroc", "n_labels"]).to_csv(
        tables / "chapter_macro_auroc.csv", index=False, float_format="%.6f")
    mcc = evaluation.mcc_matrix(ds.Y)
    top = evaluation.top_correlations(mcc, ds.label_set.codes, ev.mcc_top)
    pd.DataFrame(top, columns=["code_a", "code_b", "mcc"]).to_csv(
        tables / "mcc_top.csv", index=False, float_format="%.6f")
    if ev.cross_scenarios and ck is not None:
        _cross_scenarios(cfg, ds, ck, spec, tables / "scenarios.csv")
    print(f"{spec}: macro AUROC {report.macro:.4f} ({report.macro_low:.4f}-{report.macro_high:.4f}) "
          f"on {len(view)} records, {len(report.skipped)} label(s) skipped -> {run / 'report.json'}")
    return report


def _cross_scenarios(cfg, ds, ck, spec, path):
    rows = []
    for subset in dataset.SUBSETS:
        for source in dataset.LABEL_SOURCES:
            e = dataset.ScenarioSpec(spec.train_subset, spec.train_labels, subset, source)
            view = _eval_set(ds, e)
            if len(view) == 0:
                rows.append((str(e), 0, np.nan, np.nan, np.nan))
                continue
            P = _scores(ck, view, cfg)
            try:
                res = evaluation.bootstrap_ci(P, view.Y, cfg.eval.n_boot, cfg.eval.alpha, cfg.seed,
                                              cfg.threads, cfg.eval.method)
                rows.append((str(e), len(view), res.macro, res.macro_low, res.macro_high))
            except DataError:
                rows.append((str(e), len(view), np.nan, np.nan, np.nan))
    pd.DataFrame(rows, columns=["scenario", "n_records", "macro_auroc", "ci_low", "ci_high"]).to_csv(
        path, index=False, float_format="%.6f")


def cmd_compare(cfg: RunConfig, checkpoint_a=None, checkpoint_b=None, scores_a=None, scores_b=None,
                out_name: str = "compare") -> evaluation.PairedResult:
    ds = _load_dataset(cfg, signals=scores_a is None or scores_b is None)
    spec = dataset.ScenarioSpec.parse(cfg.scenario)
    view = _eval_set(ds, spec)
    if len(view) == 0:
        raise DataError(f"no test records for {spec}")
    Ps = []
    for ckp, sp in ((checkpoint_a, scores_a), (checkpoint_b, scores_b)):
        if sp is None and ckp is None:
            raise ConfigError("compare needs a checkpoint or a scores file for both models")
        ck = None if sp is not None else _load_checkpoint(Path(ckp), ds)
        Ps.append(_scores(ck, view, cfg, sp))
    res = evaluation.paired_significance(Ps[0], Ps[1], view.Y, cfg.eval.n_boot, cfg.seed,
                                         cfg.eval.alpha, cfg.threads, cfg.eval.method)
    tables = cfg.run_dir / "tables"
    tables.mkdir(parents=True, exist_ok=True)
    pd.DataFrame({"code": ds.label_set.codes, "diff": res.diff, "ci_low": res.low, "ci_high": res.high,
                  "significant": res.significant.astype(int)}).to_csv(
        tables / f"{out_name}.csv", index=False, float_format="%.6f")
    _write_json(tables / f"{out_name}.json", evaluation._clean_floats({
        "scenario": str(spec), "n_records": len(view), "n_boot": res.n_boot, "seed": res.seed,
        "macro_diff": res.macro_diff, "macro_low": res.macro_low, "macro_high": res.macro_high,
        "macro_significant": res.macro_significant, "n_better_a": res.n_better_a,
        "n_better_b": res.n_better_b, "n_labels": len(res.diff)}))
    print(f"{spec}: macro diff {res.macro_diff:+.4f} ({res.macro_low:+.4f} to {res.macro_high:+.4f}); "
          f"A significantly better on {res.n_better_a}/{len(res.diff)} labels, "
          f"B on {res.n_better_b}/{len(res.diff)}")
    return res


# -- misc commands -------------------------------------------------------------------------

def cmd_dump_chapters(out=None) -> None:
    out = out or sys.stdout
    out.write("chapter,number,start,end,title\n")
    for c in sorted(icd.CHAPTERS, key=lambda c: c.number):
        out.write(f'{c.id},{c.number},{c.start},{c.end},"{c.title}"\n')


SYNTH_CONFIG = {
    "name": "synth",
    "scenario": "T(ED2ALL)-E(ED2ALL)",
    "seed": 0,
    "threads": 1,
    "paths": {"records": "records.csv", "edstays": "edstays.csv", "admissions": "admissions.csv",
              "ed_diagnoses": "ed_diagnosis.csv", "hosp_diagnoses": "diagnoses_icd.csv",
              "mapping": "icd9to10.tsv", "descriptions": "descriptions.tsv", "out_dir": "run"},
    "build": {"threshold": 3},
    "model": {"family": "S4", "preset": "tiny", "dropout": 0.0},
    "train": {"epochs": 3, "batch_size": 8},
    "eval": {"n_boot": 200},
}


def cmd_synth(out_dir, n_subjects: int = 20, seed: int = 0) -> dict:
    from .synthetic import write_cohort

    info = write_cohort(out_dir, n_subjects, seed)
    conf = dict(SYNTH_CONFIG, seed=seed)
    (Path(out_dir) / "config.toml").write_text(tomli_w.dumps(conf), encoding="utf-8")
    print(f"wrote synthetic cohort ({info['expected']['records_in']} records) and config.toml to {out_dir}")
    return info


# -- argument parsing ------------------------------------------------------------------------

def _load_cfg(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    over = {}
    for key in ("seed", "threads", "scenario", "name"):
        v = getattr(args, key, None)
        if v is not None:
            over[key] = v
    if over:
        cfg = replace(cfg, **over)
        try:
            dataset.ScenarioSpec.parse(cfg.scenario)
        except DataError as exc:
            raise ConfigError(str(exc)) from None
    return cfg


def _run(args) -> int:
    if args.command == "synth":
        cmd_synth(args.out, args.subjects, args.seed if args.seed is not None else 0)
        return EXIT_OK
    if args.command == "icd":
        cmd_dump_chapters()
        return EXIT_OK
    cfg = _load_cfg(args)
    import torch

    torch.set_num_threads(max(1, cfg.threads))
    started = time.time()
    if args.command == "build":
        cmd_build(cfg)
    elif args.command == "train":
        cmd_train(cfg)
    elif args.command == "eval":
        cmd_eval(cfg, args.checkpoint, args.scores)
    elif args.command == "compare":
        cmd_compare(cfg, args.checkpoint_a, args.checkpoint_b, args.scores_a, args.scores_b, args.out_name)
    _snapshot(cfg, args.command, started)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ecg-icd", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="TOML run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int)
        p.add_argument("--scenario", help='e.g. "T(ED2ALL)-E(ED2ALL)"')
        p.add_argument("--name", help="run name (output subdirectory)")
        return p

    common(sub.add_parser("build", help="link cohort, select labels, preprocess signals, assign folds"))
    common(sub.add_parser("train", help="train a model on folds 1-8 with selection on fold 9"))
    p = common(sub.add_parser("eval", help="bootstrap evaluation on the test fold"))
    p.add_argument("--checkpoint", help="defaults to <run>/checkpoint.bin")
    p.add_argument("--scores", help=".npy score matrix to evaluate instead of a model")
    p = common(sub.add_parser("compare", help="paired bootstrap comparison of two models"))
    p.add_argument("--checkpoint-a")
    p.add_argument("--checkpoint-b")
    p.add_argument("--scores-a")
    p.add_argument("--scores-b")
    p.add_argument("--out-name", default="compare")
    icd_p = sub.add_parser("icd", help="ICD utilities")
    icd_sub = icd_p.add_subparsers(dest="icd_command", required=True)
    icd_sub.add_parser("dump-chapters", help="print the compiled chapter range table as CSV")
    p = sub.add_parser("synth", help="write a synthetic MIMIC-shaped cohort and config")
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", type=int, default=20)
    p.add_argument("--seed", type=int)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except EcgIcdError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
