"""Fold assignment, scenario parsing and the bit-packed labeled dataset."""
from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
import pandas as pd

from .cohort import ED, HOSP, DiagnosisSet
from .exceptions import DataError, ScenarioParseError, UnknownRecord
from .icd import LabelSet

N_FOLDS = 10
TRAIN_FOLDS = tuple(range(1, 9))
VAL_FOLD = 9
TEST_FOLD = 10
ALL = "ALL"
SUBSETS = (ALL, ED, HOSP)
LABEL_SOURCES = (ALL, ED, HOSP)


# -- folds --------------------------------------------------------------------

@dataclass(frozen=True)
class FoldAssignment:
    folds: Mapping[int, int]
    seed: int

    def __getitem__(self, subject_id):
        return self.folds[subject_id]

    def __len__(self):
        return len(self.folds)

    def histogram(self) -> list[int]:
        counts = np.bincount(np.fromiter(self.folds.values(), dtype=int), minlength=N_FOLDS + 1)
        return counts[1:].tolist()

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["subject_id", "fold"])
            for sid in sorted(self.folds):
                w.writerow([sid, self.folds[sid]])

    @classmethod
    def from_csv(cls, path, seed: int = -1) -> "FoldAssignment":
        df = pd.read_csv(path)
        return cls(dict(zip(df["subject_id"].astype(int), df["fold"].astype(int))), seed)


def assign_folds(subjects, seed: int, balanced: bool = True) -> FoldAssignment:
    """Randomly distribute subjects over folds 1..10.

    Subjects are sorted, then permuted with ``numpy.random.default_rng(seed)``
    (PCG64). In balanced mode the permuted list is dealt round-robin, so fold
    sizes differ by at most one; otherwise each subject draws a fold
    independently and uniformly.
    """
    subs = sorted(set(int(s) for s in subjects))
    if not subs:
        raise DataError("assign_folds needs at least one subject")
    rng = np.random.default_rng(seed)
    if balanced:
        order = rng.permutation(len(subs))
        folds = {subs[i]: int(pos % N_FOLDS) + 1 for pos, i in enumerate(order)}
    else:
        draws = rng.integers(1, N_FOLDS + 1, size=len(subs))
        folds = {s: int(f) for s, f in zip(subs, draws)}
    return FoldAssignment(folds, seed)


# -- scenarios ----------------------------------------------------------------

_SCENARIO = re.compile(r"^T\((ALL|ED|HOSP)2(ALL|ED|HOSP)\)-E\((ALL|ED|HOSP)2(ALL|ED|HOSP)\)$")


@dataclass(frozen=True)
class ScenarioSpec:
    train_subset: str
    train_labels: str
    eval_subset: str
    eval_labels: str

    @classmethod
    def parse(cls, text: str) -> "ScenarioSpec":
        m = _SCENARIO.match(str(text).strip())
        if not m:
            raise ScenarioParseError(f"scenario must look like T(ED2ALL)-E(ED2ALL), got {text!r}")
        return cls(*m.groups())

    def __str__(self):
        return f"T({self.train_subset}2{self.train_labels})-E({self.eval_subset}2{self.eval_labels})"

    def phase(self, phase: str) -> tuple[str, str]:
        if phase == "train":
            return self.train_subset, self.train_labels
        if phase == "eval":
            return self.eval_subset, self.eval_labels
        raise ValueError(f"phase must be 'train' or 'eval', got {phase!r}")


MAIN_SCENARIO = ScenarioSpec.parse("T(ED2ALL)-E(ED2ALL)")


# -- labeled dataset ------------------------------------------------------------

class _Store:
    """Shared, immutable backing arrays for a dataset and all its views."""

    def __init__(self, records: pd.DataFrame, packed: dict, label_set: LabelSet,
                 signals: np.ndarray | None, meta: dict):
        self.records = records
        self.packed = packed
        self.label_set = label_set
        self.signals = signals
        self.meta = meta
        for arr in packed.values():
            arr.setflags(write=False)
        if signals is not None:
            signals.setflags(write=False)


class LabeledDataset:
    """Records x labels binary matrix with folds and site information.

    Views produced by :meth:`take`, :func:`eval_view` and
    :func:`apply_scenario` share the parent's storage and only carry a row
    index and a label source.
    """

    def __init__(self, store: _Store, rows: np.ndarray | None = None, label_source: str = ALL):
        self._store = store
        n = len(store.records)
        self.rows = np.arange(n) if rows is None else np.asarray(rows, dtype=np.int64)
        if label_source not in LABEL_SOURCES:
            raise ValueError(f"unknown label source {label_source!r}")
        self.label_source = label_source

    def __len__(self):
        return len(self.rows)

    def __repr__(self):
        return (f"LabeledDataset(n_records={len(self)}, n_labels={len(self.label_set)}, "
                f"label_source={self.label_source!r})")

    @property
    def label_set(self) -> LabelSet:
        return self._store.label_set

    @property
    def records(self) -> pd.DataFrame:
        return self._store.records.iloc[self.rows]

    @property
    def meta(self) -> dict:
        return self._store.meta

    @property
    def Y(self) -> np.ndarray:
        packed = self._store.packed[self.label_source][self.rows]
        return np.unpackbits(packed, axis=1, count=len(self.label_set)).astype(np.uint8)

    def labels(self, source: str) -> np.ndarray:
        packed = self._store.packed[source][self.rows]
        return np.unpackbits(packed, axis=1, count=len(self.label_set)).astype(np.uint8)

    @property
    def zero_rows(self) -> np.ndarray:
        """Records whose codes all fell below the threshold (kept, flagged)."""
        return ~self.Y.any(axis=1)

    @property
    def has_signals(self) -> bool:
        return self._store.signals is not None

    @property
    def X(self) -> np.ndarray:
        if self._store.signals is None:
            raise DataError("dataset was built without signals")
        return self._store.signals[self.rows]

    def signal(self, i: int) -> np.ndarray:
        """Single record waveform as a read-only view of the shared array."""
        return self._store.signals[self.rows[i]]

    def shares_storage_with(self, other: "LabeledDataset") -> bool:
        return self._store is other._store

    def take(self, positions, label_source: str | None = None) -> "LabeledDataset":
        pos = np.asarray(positions)
        if pos.dtype == bool:
            pos = np.flatnonzero(pos)
        return LabeledDataset(self._store, self.rows[pos], label_source or self.label_source)

    def with_label_source(self, source: str) -> "LabeledDataset":
        return LabeledDataset(self._store, self.rows, source)

    def folds(self, *folds: int) -> "LabeledDataset":
        return self.take(self.records["fold"].isin(folds).to_numpy())

    def split(self) -> tuple["LabeledDataset", "LabeledDataset", "LabeledDataset"]:
        """(train, validation, test) by fold."""
        return self.folds(*TRAIN_FOLDS), self.folds(VAL_FOLD), self.folds(TEST_FOLD)

    def column_counts(self) -> np.ndarray:
        return self.Y.sum(axis=0)


def _pack(rows_codes: list, label_set: LabelSet) -> np.ndarray:
    dense = np.zeros((len(rows_codes), len(label_set)), dtype=np.uint8)
    idx = label_set.index
    for i, codes in enumerate(rows_codes):
        cols = [idx[c] for c in codes if c in idx]
        dense[i, cols] = 1
    return np.packbits(dense, axis=1)


def build_matrix(records: pd.DataFrame, diagnosis_sets: Mapping[str, DiagnosisSet],
                 label_set: LabelSet, signals: np.ndarray | None = None,
                 meta: dict | None = None) -> LabeledDataset:
    """Assemble the binary label matrices (ALL, ED, HOSP sources).

    ``records`` needs record_id, subject_id, ecg_time, site, fold and
    optionally ed_stay / hadm_id. Records without a diagnosis set are
    dropped; a diagnosis set without a record raises ``UnknownRecord``.
    ``signals`` rows must align with ``records``.
    """
    recs = records.copy()
    recs["record_id"] = recs["record_id"].astype(str)
    known = set(recs["record_id"])
    unknown = sorted(set(diagnosis_sets) - known)
    if unknown:
        raise UnknownRecord(f"diagnosis set(s) without record: {', '.join(unknown[:5])}")
    keep = recs["record_id"].isin(diagnosis_sets).to_numpy()
    recs = recs[keep].reset_index(drop=True)
    if signals is not None:
        if len(signals) != len(keep):
            raise DataError(f"{len(signals)} signals for {len(keep)} records")
        signals = np.ascontiguousarray(signals[keep])
    for col in ("site", "fold", "subject_id", "ecg_time"):
        if col not in recs:
            raise DataError(f"records need a {col!r} column")
    recs["ecg_time"] = pd.to_datetime(recs["ecg_time"])
    dsets = [diagnosis_sets[r] for r in recs["record_id"]]
    recs["label_source"] = [d.source for d in dsets]
    recs["has_ed_labels"] = [bool(d.ed_codes) for d in dsets]
    recs["has_hosp_labels"] = [bool(d.hosp_codes) for d in dsets]
    if "stay_key" not in recs:
        ed = recs["ed_stay"] if "ed_stay" in recs else pd.Series([None] * len(recs))
        hadm = recs["hadm_id"] if "hadm_id" in recs else pd.Series([None] * len(recs))
        recs["stay_key"] = [_stay_key(s, e, h) for s, e, h in zip(recs["site"], ed, hadm)]
    packed = {
        ALL: _pack([d.codes for d in dsets], label_set),
        ED: _pack([d.ed_codes for d in dsets], label_set),
        HOSP: _pack([d.hosp_codes for d in dsets], label_set),
    }
    return LabeledDataset(_Store(recs, packed, label_set, signals, dict(meta or {})))


def _stay_key(site, ed_stay, hadm_id) -> str:
    if site == ED and pd.notna(ed_stay):
        return f"ED:{int(ed_stay)}"
    if site == HOSP and pd.notna(hadm_id):
        return f"HOSP:{int(hadm_id)}"
    return f"{site}:?"


def eval_view(ds: LabeledDataset) -> LabeledDataset:
    """Keep the earliest ECG per (subject, stay) in validation/test folds.

    Ties on the timestamp keep the lexicographically smallest record_id.
    Training-fold rows pass through untouched.
    """
    rec = ds.records.reset_index(drop=True)
    is_eval = rec["fold"].isin((VAL_FOLD, TEST_FOLD)).to_numpy()
    ev = rec[is_eval].assign(_pos=np.flatnonzero(is_eval))
    ev = ev.sort_values(["subject_id", "stay_key", "ecg_time", "record_id"], kind="mergesort")
    first = ev.drop_duplicates(["subject_id", "stay_key"], keep="first")["_pos"].to_numpy()
    keep = ~is_eval
    keep[first] = True
    return ds.take(keep)


def apply_scenario(ds: LabeledDataset, spec, phase: str) -> LabeledDataset:
    """Filter by recording site and switch the label source for one phase.

    Records lacking a diagnosis set from the requested source are dropped
    (e.g. E(ED2HOSP) keeps only ED records with a hospital diagnosis set).
    """
    if not isinstance(spec, ScenarioSpec):
        spec = ScenarioSpec.parse(spec)
    subset, source = spec.phase(phase)
    rec = ds.records
    mask = np.ones(len(rec), dtype=bool)
    if subset != ALL:
        mask &= (rec["site"] == subset).to_numpy()
    if source == ED:
        mask &= rec["has_ed_labels"].to_numpy()
    elif source == HOSP:
        mask &= rec["has_hosp_labels"].to_numpy()
    return ds.take(mask, label_source=source)


def leakage_free(ds: LabeledDataset) -> bool:
    rec = ds.records
    split = rec["fold"].map(lambda f: "test" if f == TEST_FOLD else "val" if f == VAL_FOLD else "train")
    return bool((rec.assign(_s=split).groupby("subject_id")["_s"].nunique() <= 1).all())


# -- persistence ---------------------------------------------------------------

MANIFEST_VERSION = 1


def save_manifest(ds: LabeledDataset, path, diagnosis_sets: Mapping[str, DiagnosisSet],
                  signal_paths: Mapping[str, str] | None = None, extra: dict | None = None) -> None:
    """Write the JSON dataset manifest (record list, label set, provenance)."""
    records = []
    for row in ds.records.itertuples(index=False):
        d = diagnosis_sets[row.record_id]
        records.append({
            "record_id": row.record_id,
            "subject_id": int(row.subject_id),
            "ecg_time": pd.Timestamp(row.ecg_time).isoformat(),
            "site": row.site,
            "stay_key": row.stay_key,
            "ed_stay": None if pd.isna(getattr(row, "ed_stay", None)) else int(row.ed_stay),
            "hadm_id": None if pd.isna(getattr(row, "hadm_id", None)) else int(row.hadm_id),
            "fold": int(row.fold),
            "label_source": d.source,
            "ed_codes": sorted(d.ed_codes),
            "hosp_codes": sorted(d.hosp_codes),
            "signal": (signal_paths or {}).get(row.record_id),
        })
    doc = {"version": MANIFEST_VERSION, **(extra or {}), "label_set": ds.label_set.to_dict(),
           "records": records}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_manifest(path, load_signals: bool = True) -> LabeledDataset:
    """Rebuild a dataset from a manifest written by :func:`save_manifest`."""
    from .signal import read_ecg1

    path = Path(path)
    doc = json.loads(path.read_text(encoding="utf-8"))
    if doc.get("version") != MANIFEST_VERSION:
        raise DataError(f"{path}: unsupported manifest version {doc.get('version')}")
    label_set = LabelSet.from_dict(doc["label_set"])
    rows = doc["records"]
    dsets = {}
    for r in rows:
        ed, hosp = frozenset(r["ed_codes"]), frozenset(r["hosp_codes"])
        codes = hosp if r["label_source"] == HOSP else ed
        dsets[r["record_id"]] = DiagnosisSet(r["record_id"], codes, r["label_source"], ed, hosp)
    records = pd.DataFrame([{k: r[k] for k in ("record_id", "subject_id", "ecg_time", "site",
                                                "stay_key", "ed_stay", "hadm_id", "fold")}
                            for r in rows])
    signals = None
    if load_signals and rows and all(r.get("signal") for r in rows):
        arrs = [read_ecg1(path.parent / r["signal"])[0] for r in rows]
        signals = np.stack(arrs).astype(np.float32)
    meta = {k: v for k, v in doc.items() if k not in ("records", "label_set")}
    return build_matrix(records, dsets, label_set, signals, meta)
