"""Link ECG recordings to ED stays / hospital admissions and pick their
diagnosis sets."""
from __future__ import annotations

import logging
import warnings
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import pandas as pd

from . import icd
from .exceptions import DataError, OverlappingIntervalsWarning

logger = logging.getLogger(__name__)

ED = "ED"
HOSP = "HOSP"
NONE = "NONE"

MAX_ED_CODES = 9
MAX_HOSP_CODES = 39


@dataclass(frozen=True)
class StayInterval:
    subject_id: int
    key: int
    kind: str
    in_time: pd.Timestamp
    out_time: pd.Timestamp
    hadm_id: int | None = None  # ED stays only: admission recorded in the ED table

    def __post_init__(self):
        if self.in_time > self.out_time:
            raise DataError(f"{self.kind} interval {self.key}: in_time after out_time")

    def contains(self, t) -> bool:
        return self.in_time <= t <= self.out_time


@dataclass(frozen=True)
class Linkage:
    record_id: str
    subject_id: int
    ecg_time: pd.Timestamp
    site: str
    ed_stay: int | None = None
    hosp_admission: int | None = None

    @property
    def stay_key(self):
        """stay_id for ED records, hadm_id for hospital records."""
        if self.site == ED:
            return ("ED", self.ed_stay)
        if self.site == HOSP:
            return ("HOSP", self.hosp_admission)
        return None


@dataclass(frozen=True)
class DiagnosisSet:
    record_id: str
    codes: frozenset
    source: str
    ed_codes: frozenset = field(default=frozenset())
    hosp_codes: frozenset = field(default=frozenset())

    def for_source(self, source: str) -> frozenset:
        if source == "ALL":
            return self.codes
        return self.ed_codes if source == ED else self.hosp_codes


@dataclass(frozen=True)
class Discard:
    record_id: str
    reason: str


def _pick_latest(candidates: Sequence[StayInterval], record_id, ecg_time) -> StayInterval:
    if len(candidates) > 1:
        warnings.warn(
            f"record {record_id}: {len(candidates)} overlapping {candidates[0].kind} intervals "
            f"contain {ecg_time}; using the latest",
            OverlappingIntervalsWarning, stacklevel=3)
    return max(candidates, key=lambda s: (s.in_time, -s.key))


def link_record(ecg_time, subject_id, ed_stays: Iterable[StayInterval],
                admissions: Iterable[StayInterval], record_id: str = "") -> Linkage:
    """Site an ECG by closed-interval containment, ED stays first."""
    ecg_time = pd.Timestamp(ecg_time)
    ed_stays = [s for s in ed_stays if s.subject_id == subject_id]
    admissions = [a for a in admissions if a.subject_id == subject_id]

    in_ed = [s for s in ed_stays if s.contains(ecg_time)]
    if in_ed:
        stay = _pick_latest(in_ed, record_id, ecg_time)
        hadm = stay.hadm_id
        if hadm is None:
            follow = [a for a in admissions
                      if a.contains(ecg_time) or stay.in_time <= a.in_time <= stay.out_time]
            if follow:
                hadm = max(follow, key=lambda a: (a.in_time, -a.key)).key
        return Linkage(record_id, subject_id, ecg_time, ED, stay.key, hadm)

    in_hosp = [a for a in admissions if a.contains(ecg_time)]
    if in_hosp:
        adm = _pick_latest(in_hosp, record_id, ecg_time)
        return Linkage(record_id, subject_id, ecg_time, HOSP, None, adm.key)
    return Linkage(record_id, subject_id, ecg_time, NONE)


def resolve_diagnoses(linkage: Linkage, ed_dx: Mapping, hosp_dx: Mapping,
                      mapping=None, strict: bool = False,
                      skipped: Counter | None = None) -> DiagnosisSet | Discard:
    """Choose the hospital set when present, else the ED set.

    ``ed_dx`` maps stay_id and ``hosp_dx`` maps hadm_id to lists of
    ``(icd_code, icd_version)`` rows.
    """
    if linkage.site == NONE:
        return Discard(linkage.record_id, "unlinked")
    ed_rows = ed_dx.get(linkage.ed_stay, ()) if linkage.ed_stay is not None else ()
    hosp_rows = hosp_dx.get(linkage.hosp_admission, ()) if linkage.hosp_admission is not None else ()
    if len(ed_rows) > MAX_ED_CODES or len(hosp_rows) > MAX_HOSP_CODES:
        logger.debug("record %s exceeds the usual diagnosis count caps", linkage.record_id)
    ed_codes = frozenset(icd.normalize_codes(ed_rows, mapping, strict, skipped))
    hosp_codes = frozenset(icd.normalize_codes(hosp_rows, mapping, strict, skipped))
    if hosp_codes:
        return DiagnosisSet(linkage.record_id, hosp_codes, HOSP, ed_codes, hosp_codes)
    if ed_codes:
        return DiagnosisSet(linkage.record_id, ed_codes, ED, ed_codes, hosp_codes)
    return Discard(linkage.record_id, "empty_diagnoses")


# -- table loading ----------------------------------------------------------

def _ts(col):
    return pd.to_datetime(col, errors="raise")


def _opt_int(v):
    return None if pd.isna(v) else int(v)


def load_ed_stays(path_or_df) -> list[StayInterval]:
    df = path_or_df if isinstance(path_or_df, pd.DataFrame) else pd.read_csv(path_or_df)
    _require(df, ["subject_id", "stay_id", "intime", "outtime"], "edstays")
    df = df.assign(intime=_ts(df["intime"]), outtime=_ts(df["outtime"]))
    df = df.sort_values(["subject_id", "intime", "stay_id"], kind="mergesort")
    if df["stay_id"].duplicated().any():
        raise DataError("edstays: duplicate stay_id")
    hadm = df["hadm_id"] if "hadm_id" in df else [None] * len(df)
    return [StayInterval(int(s), int(k), ED, i, o, _opt_int(h))
            for s, k, i, o, h in zip(df["subject_id"], df["stay_id"], df["intime"], df["outtime"], hadm)]


def load_admissions(path_or_df) -> list[StayInterval]:
    df = path_or_df if isinstance(path_or_df, pd.DataFrame) else pd.read_csv(path_or_df)
    _require(df, ["subject_id", "hadm_id", "admittime", "dischtime"], "admissions")
    death = _ts(df["deathtime"]) if "deathtime" in df else pd.Series(pd.NaT, index=df.index)
    out_time = _ts(df["dischtime"]).fillna(death)
    df = df.assign(admittime=_ts(df["admittime"]), out_time=out_time)
    if df["hadm_id"].duplicated().any():
        raise DataError("admissions: duplicate hadm_id")
    dropped = int(df["out_time"].isna().sum())
    if dropped:
        logger.warning("admissions: %d row(s) without discharge or death time skipped", dropped)
    df = df.dropna(subset=["out_time"]).sort_values(["subject_id", "admittime", "hadm_id"], kind="mergesort")
    return [StayInterval(int(s), int(k), HOSP, i, o)
            for s, k, i, o in zip(df["subject_id"], df["hadm_id"], df["admittime"], df["out_time"])]


def load_diagnoses(path_or_df) -> dict[int, list[tuple[str, int]]]:
    """Group ``(icd_code, icd_version)`` rows by stay_id or hadm_id, in seq_num order."""
    df = path_or_df if isinstance(path_or_df, pd.DataFrame) else pd.read_csv(
        path_or_df, dtype={"icd_code": str})
    key = "stay_id" if "stay_id" in df else "hadm_id" if "hadm_id" in df else None
    if key is None:
        raise DataError("diagnosis table needs a stay_id or hadm_id column")
    _require(df, ["icd_code", "icd_version"], "diagnosis")
    sort_cols = [key, "seq_num"] if "seq_num" in df else [key]
    df = df.sort_values(sort_cols, kind="mergesort")
    out: dict[int, list] = defaultdict(list)
    for k, code, ver in zip(df[key], df["icd_code"], df["icd_version"]):
        out[int(k)].append((str(code).strip(), int(ver)))
    return dict(out)


def _require(df, cols, name):
    missing = [c for c in cols if c not in df.columns]
    if missing:
        raise DataError(f"{name}: missing column(s) {', '.join(missing)}")


@dataclass
class CohortResult:
    linkages: dict[str, Linkage]
    diagnoses: dict[str, DiagnosisSet]
    discards: Counter
    skipped_codes: Counter


def link_cohort(records: pd.DataFrame, ed_stays, admissions, ed_dx, hosp_dx,
                mapping=None, strict: bool = False) -> CohortResult:
    """Link every manifest row and resolve its diagnoses.

    Output ordering depends only on record ids, so shuffled inputs give
    identical results.
    """
    _require(records, ["record_id", "subject_id", "ecg_time"], "record manifest")
    by_subject_ed = defaultdict(list)
    by_subject_adm = defaultdict(list)
    for s in ed_stays:
        by_subject_ed[s.subject_id].append(s)
    for a in admissions:
        by_subject_adm[a.subject_id].append(a)

    recs = records.assign(record_id=records["record_id"].astype(str)).sort_values("record_id", kind="mergesort")
    linkages, diagnoses = {}, {}
    discards, skipped = Counter(), Counter()
    for rid, sid, t in zip(recs["record_id"], recs["subject_id"], _ts(recs["ecg_time"])):
        sid = int(sid)
        link = link_record(t, sid, by_subject_ed.get(sid, ()), by_subject_adm.get(sid, ()), rid)
        linkages[rid] = link
        res = resolve_diagnoses(link, ed_dx, hosp_dx, mapping, strict, skipped)
        if isinstance(res, Discard):
            discards[res.reason] += 1
        else:
            diagnoses[rid] = res
    return CohortResult(linkages, diagnoses, discards, skipped)
