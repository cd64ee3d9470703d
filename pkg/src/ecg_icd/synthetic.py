"""Synthetic data: planted-signature ECG arrays and a small MIMIC-shaped cohort.

The planted arrays give every label a lead and a frequency; positive
records carry short sinusoid bursts on that lead, repeated often enough
that any 2.5 s window contains one. The cohort fixture writes the CSV/TSV
tables the ``build`` command consumes, together with the counts each stage
should produce, computed from the generator's own bookkeeping.
"""
from __future__ import annotations

import csv
import json
from collections import Counter
from pathlib import Path

import numpy as np
import pandas as pd

from .signal import write_ecg1

BURST_PERIOD_S = 1.0
BURST_LEN_S = 0.4


def _bursts(length: int, fs: float, freq: float, phase: int, amplitude: float) -> np.ndarray:
    t = np.arange(length) / fs
    period, width = int(BURST_PERIOD_S * fs), int(BURST_LEN_S * fs)
    on = ((np.arange(length) - phase) % period) < width
    return amplitude * on * np.sin(2 * np.pi * freq * t)


def label_signature(j: int, n_leads: int) -> tuple[int, float]:
    """(lead, frequency in Hz) carrying label ``j``."""
    return j % n_leads, 3.0 + j % 8


def planted_dataset(n_records: int = 512, n_labels: int = 8, n_leads: int = 12,
                    length: int = 1000, fs: float = 100.0, prevalence: float = 0.3,
                    noise: float = 0.1, amplitude: float = 0.6, seed: int = 0):
    """Return ``(X, Y)``: float32 ``(records, leads, length)`` and uint8 ``(records, labels)``.

    Labels are independent Bernoulli(prevalence); each is re-drawn until both
    classes occur so every column has a defined AUROC.
    """
    rng = np.random.default_rng(seed)
    Y = (rng.random((n_records, n_labels)) < prevalence).astype(np.uint8)
    for j in range(n_labels):
        while n_records > 1 and Y[:, j].min() == Y[:, j].max():
            Y[:, j] = rng.random(n_records) < prevalence
    X = noise * rng.standard_normal((n_records, n_leads, length))
    period = int(BURST_PERIOD_S * fs)
    for i in range(n_records):
        for j in np.flatnonzero(Y[i]):
            lead, freq = label_signature(int(j), n_leads)
            X[i, lead] += _bursts(length, fs, freq, int(rng.integers(0, period)), amplitude)
    return X.astype(np.float32), Y


# -- cohort fixture ------------------------------------------------------------------

ICD9_MAP = {
    "42731": ["I4891"],
    "4019": ["I10"],
    "25000": ["E119"],
    "4280": ["I509"],
    "5849": ["N179"],
    "78650": ["R079", "R0789"],
}
ED_POOL = ["I48.91", "I48.92", "I10", "R07.9", "J18.9", "N17.9", "E11.9", "T36.0X1A"]
HOSP_POOL = ["I48.91", "I48.0", "I10", "E11.9", "E11.65", "N17.9", "J18.9", "I21.4", "I50.9",
             "I50.23", "Z66", "E78.5", "N18.3"]
HOSP_POOL9 = list(ICD9_MAP)
CATEGORY_LEAD = {
    "I10": (0, 3.0), "I48": (1, 6.0), "E11": (2, 4.0), "N17": (3, 5.0), "J18": (4, 7.0),
    "I21": (5, 8.0), "I50": (6, 9.0), "Z66": (7, 10.0), "R07": (8, 11.0), "T36": (9, 12.0),
    "E78": (10, 4.0), "N18": (11, 5.0),
}
DESCRIPTIONS = {
    "I10": "Essential (primary) hypertension", "I48": "Atrial fibrillation and flutter",
    "E11": "Type 2 diabetes mellitus", "N17": "Acute kidney failure", "J18": "Pneumonia, unspecified organism",
    "I21": "Acute myocardial infarction", "I50": "Heart failure", "Z66": "Do not resuscitate",
    "R07": "Pain in throat and chest", "T36": "Poisoning by systemic antibiotics",
    "E78": "Disorders of lipoprotein metabolism", "N18": "Chronic kidney disease",
}
FS_RAW = 500.0
N_SAMPLES_RAW = 5000


def _category(raw: str, version: int) -> list[str]:
    if version == 9:
        return sorted({c[:3] for c in ICD9_MAP[raw]})
    return [raw.replace(".", "")[:3]]


class _Cohort:
    def __init__(self, n_subjects: int, seed: int):
        self.rng = np.random.default_rng(seed)
        self.base = pd.Timestamp("2180-01-01 00:00:00")
        self.edstays, self.admissions, self.ed_dx, self.hosp_dx, self.records = [], [], [], [], []
        self.expected = Counter()
        self.next_stay, self.next_hadm, self.next_rec = 30000000, 20000000, 40000000
        self.record_cats: dict[str, list[str]] = {}
        for s in range(n_subjects):
            self._subject(10000 + s, s)

    def _t(self, start, lo_min, hi_min):
        return start + pd.Timedelta(minutes=int(self.rng.integers(lo_min, hi_min)))

    def _codes(self, pool, k_lo, k_hi):
        k = int(self.rng.integers(k_lo, k_hi + 1))
        return list(self.rng.choice(pool, size=min(k, len(pool)), replace=False))

    def _ed_stay(self, sid, intime, hours, hadm=None, with_dx=True):
        stay = self.next_stay = self.next_stay + 1
        outtime = intime + pd.Timedelta(hours=hours)
        self.edstays.append(dict(subject_id=sid, stay_id=stay, hadm_id=hadm, intime=intime, outtime=outtime))
        codes = self._codes(ED_POOL, 1, 4) if with_dx else []
        for n, c in enumerate(codes, 1):
            self.ed_dx.append(dict(subject_id=sid, stay_id=stay, seq_num=n, icd_code=c, icd_version=10))
        return stay, outtime, codes

    def _admission(self, sid, admittime, days, death=False, icd9=False, extra=()):
        hadm = self.next_hadm = self.next_hadm + 1
        disch = admittime + pd.Timedelta(days=days)
        self.admissions.append(dict(subject_id=sid, hadm_id=hadm, admittime=admittime,
                                    dischtime=None if death else disch,
                                    deathtime=disch if death else None))
        rows = [(c, 9) for c in self._codes(HOSP_POOL9, 1, 3)] if icd9 else []
        rows += [(c, 10) for c in self._codes(HOSP_POOL, 2, 6)]
        rows += [(c, 10) for c in extra]
        for n, (c, v) in enumerate(rows, 1):
            self.hosp_dx.append(dict(subject_id=sid, hadm_id=hadm, seq_num=n, icd_code=c, icd_version=v))
        return hadm, disch, rows

    def _ecg(self, sid, t, outcome, codes):
        self.next_rec += 1
        rid = str(self.next_rec)
        self.records.append(dict(record_id=rid, subject_id=sid, ecg_time=t))
        self.expected[outcome] += 1
        cats = sorted({cat for c, v in codes for cat in _category(c, v)
                       if not c.startswith("BAD")})
        self.record_cats[rid] = cats
        return rid

    def _subject(self, sid, s):
        t0 = self.base + pd.Timedelta(days=30 * s)
        pattern = s % 5
        if pattern == 0:
            # ED visit, discharged home, two ECGs in the stay
            stay, out, codes = self._ed_stay(sid, t0, 6)
            ed_codes = [(c, 10) for c in codes]
            self._ecg(sid, self._t(t0, 5, 60), "ED", ed_codes)
            self._ecg(sid, self._t(t0, 61, 300), "ED", ed_codes)
        elif pattern == 1:
            # ED visit followed by admission; one ECG in each
            hadm = self.next_hadm + 1
            stay, out, codes = self._ed_stay(sid, t0, 5, hadm=hadm)
            _, _, rows = self._admission(sid, out - pd.Timedelta(hours=1), 4, icd9=(s % 2 == 0))
            self._ecg(sid, self._t(t0, 10, 200), "ED", rows)
            self._ecg(sid, out + pd.Timedelta(days=1), "HOSP", rows)
        elif pattern == 2:
            # direct admission; one malformed hospital code in the first such subject
            extra = ("BAD",) if s == 2 else ()
            _, _, rows = self._admission(sid, t0, 3, extra=extra)
            self._ecg(sid, self._t(t0, 60, 600), "HOSP", rows)
            if extra:
                self.expected["skipped_codes"] += 1
        elif pattern == 3:
            # ED visit without diagnoses, plus an ECG outside any stay
            self._ed_stay(sid, t0, 4, with_dx=False)
            self._ecg(sid, self._t(t0, 10, 200), "empty_diagnoses", [])
            self._ecg(sid, t0 + pd.Timedelta(days=10), "unlinked", [])
        else:
            # two ED visits, the second ends in an admission with in-hospital death
            stay, out, codes = self._ed_stay(sid, t0, 3)
            self._ecg(sid, self._t(t0, 5, 150), "ED", [(c, 10) for c in codes])
            t1 = t0 + pd.Timedelta(days=5)
            hadm = self.next_hadm + 1
            stay2, out2, _ = self._ed_stay(sid, t1, 4, hadm=hadm)
            _, _, rows = self._admission(sid, out2 - pd.Timedelta(minutes=30), 2, death=True,
                                         extra=("Z66",))
            self._ecg(sid, self._t(t1, 5, 200), "ED", rows)


def make_signal(cats, rng, fs=FS_RAW, n_samples=N_SAMPLES_RAW, noise=0.05, amplitude=0.5):
    """12-lead raw waveform with one burst train per present category."""
    x = noise * rng.standard_normal((12, n_samples))
    for cat in cats:
        if cat in CATEGORY_LEAD:
            lead, freq = CATEGORY_LEAD[cat]
            x[lead] += _bursts(n_samples, fs, freq, int(rng.integers(0, int(fs))), amplitude)
    return x


def write_cohort(out_dir, n_subjects: int = 20, seed: int = 0) -> dict:
    """Write a MIMIC-shaped cohort under ``out_dir`` and return paths plus expected counts.

    Files: ``edstays.csv``, ``admissions.csv``, ``ed_diagnosis.csv``,
    ``diagnoses_icd.csv``, ``icd9to10.tsv``, ``descriptions.tsv``,
    ``records.csv`` and ``signals/<record_id>.ecg1`` (500 Hz, 12 leads).
    """
    out = Path(out_dir)
    (out / "signals").mkdir(parents=True, exist_ok=True)
    c = _Cohort(n_subjects, seed)
    pd.DataFrame(c.edstays).to_csv(out / "edstays.csv", index=False)
    pd.DataFrame(c.admissions).to_csv(out / "admissions.csv", index=False)
    pd.DataFrame(c.ed_dx, columns=["subject_id", "stay_id", "seq_num", "icd_code", "icd_version"]).to_csv(
        out / "ed_diagnosis.csv", index=False)
    pd.DataFrame(c.hosp_dx).to_csv(out / "diagnoses_icd.csv", index=False)
    with open(out / "icd9to10.tsv", "w", encoding="utf-8") as fh:
        fh.write("# icd9\ticd10\n")
        for k, targets in ICD9_MAP.items():
            for t in targets:
                fh.write(f"{k}\t{t}\n")
    with open(out / "descriptions.tsv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        for k, v in sorted(DESCRIPTIONS.items()):
            w.writerow([k, v])

    sig_rng = np.random.default_rng([seed, 1])
    rows = []
    for i, r in enumerate(c.records):
        x = make_signal(c.record_cats[r["record_id"]], sig_rng)
        if i % 7 == 3:
            x[0, :40] = np.nan  # leading gap
            x[2, 2000:2010] = np.nan  # interior gap
        if i % 11 == 5:
            x[1, 2500] = 3.6  # spike beyond the clip limit
        rel = f"signals/{r['record_id']}.ecg1"
        write_ecg1(out / rel, x, FS_RAW)
        rows.append({**r, "fs": FS_RAW, "n_samples": N_SAMPLES_RAW, "path": rel})
    pd.DataFrame(rows).to_csv(out / "records.csv", index=False)

    exp = c.expected
    kept = exp["ED"] + exp["HOSP"]
    expected = {
        "records_in": len(c.records),
        "samples": kept,
        "site_ED": exp["ED"],
        "site_HOSP": exp["HOSP"],
        "discard_empty_diagnoses": exp["empty_diagnoses"],
        "discard_unlinked": exp["unlinked"],
        "skipped_codes": exp["skipped_codes"],
    }
    paths = {k: str(out / f) for k, f in [
        ("records", "records.csv"), ("edstays", "edstays.csv"), ("admissions", "admissions.csv"),
        ("ed_diagnoses", "ed_diagnosis.csv"), ("hosp_diagnoses", "diagnoses_icd.csv"),
        ("mapping", "icd9to10.tsv"), ("descriptions", "descriptions.tsv")]}
    (out / "expected.json").write_text(json.dumps(expected, indent=1, sort_keys=True) + "\n")
    return {"paths": paths, "expected": expected}
