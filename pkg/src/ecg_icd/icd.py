"""ICD code normalization, ICD-9 to ICD-10 mapping, ancestor expansion,
chapter lookup and label-vocabulary selection."""
from __future__ import annotations

import bisect
import csv
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping

from .exceptions import EmptyLabelSet, MalformedCode, OutOfRange, UnmappableIcd9

ICD9 = "ICD9"
ICD10 = "ICD10"

MAX_CODE_LEN = 5
_ICD10_RAW = re.compile(r"^[A-Z][0-9][0-9A-Z][0-9A-Z]{0,4}$")
_ICD10_NORM = re.compile(r"^[A-Z][0-9][0-9A-Z][0-9A-Z]{0,2}$")


def parse_version(version) -> str:
    """Accept 9/10, '9'/'10', 'ICD9'/'ICD10' (any case)."""
    v = str(version).strip().upper().replace("-", "").replace("CM", "")
    if v in ("9", "ICD9"):
        return ICD9
    if v in ("10", "ICD10"):
        return ICD10
    raise MalformedCode(f"unknown ICD version {version!r}")


def _clean(raw: str) -> str:
    if raw is None:
        raise MalformedCode("empty code")
    text = str(raw).strip().upper().replace(".", "")
    if not text:
        raise MalformedCode("empty code")
    if any(c.isspace() for c in text):
        raise MalformedCode(f"whitespace inside code {raw!r}")
    return text


def normalize_icd10(raw: str) -> str:
    """Uppercase, drop the dot, truncate to five characters, strip trailing X."""
    text = _clean(raw)
    if not _ICD10_RAW.match(text):
        raise MalformedCode(f"not an ICD-10 code: {raw!r}")
    text = text[:MAX_CODE_LEN]
    # placeholders never eat into the 3-character category ("X58" is a real code)
    while len(text) > 3 and text.endswith("X"):
        text = text[:-1]
    return text


def is_normalized(code: str) -> bool:
    return bool(_ICD10_NORM.match(code)) and not (len(code) > 3 and code.endswith("X"))


class MappingTable(Mapping):
    """Immutable ICD-9 -> [ICD-10, ...] lookup, one-to-many targets kept."""

    def __init__(self, entries: Mapping[str, Iterable[str]]):
        table = {}
        for src, targets in entries.items():
            key = _clean(src)
            tgt = tuple(targets)
            for t in tgt:
                if not _ICD10_RAW.match(_clean(t)):
                    raise MalformedCode(f"mapping target {t!r} for {src!r} is not ICD-10")
            table[key] = tgt
        self._entries = MappingProxyType(table)

    @classmethod
    def load(cls, path) -> "MappingTable":
        """Read ``icd9<TAB>icd10`` lines; '#' lines and blanks are skipped."""
        entries: dict[str, list[str]] = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\r\n")
                if not line.strip() or line.lstrip().startswith("#"):
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise MalformedCode(f"{path}:{lineno}: expected 2 tab-separated columns")
                src, dst = parts[0].strip(), parts[1].strip()
                targets = entries.setdefault(_clean(src), [])
                if dst not in targets:
                    targets.append(dst)
        return cls(entries)

    def __getitem__(self, key):
        return self._entries[_clean(key)]

    def __iter__(self):
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def __contains__(self, key):
        try:
            return _clean(key) in self._entries
        except MalformedCode:
            return False


def normalize(raw: str, version=ICD10, mapping: Mapping | None = None) -> list[str]:
    """Normalize one raw code into a list of ICD-10 codes.

    ICD-10 input yields a single code. ICD-9 input is looked up in ``mapping``
    and every target is normalized; duplicates after truncation are merged,
    first occurrence wins.
    """
    version = parse_version(version)
    if version == ICD10:
        return [normalize_icd10(raw)]
    key = _clean(raw)
    if mapping is None or key not in mapping:
        raise UnmappableIcd9(f"ICD-9 code {raw!r} not in mapping table")
    out: list[str] = []
    for target in mapping[key]:
        code = normalize_icd10(target)
        if code not in out:
            out.append(code)
    return out


def expand_ancestors(code: str) -> set[str]:
    """Return the code plus its 4- and 3-character prefixes.

    A prefix ending in a placeholder X collapses onto its parent.
    """
    if not is_normalized(code):
        raise MalformedCode(f"expand_ancestors expects a normalized ICD-10 code, got {code!r}")
    out = set()
    for n in range(3, len(code) + 1):
        prefix = code[:n]
        while len(prefix) > 3 and prefix.endswith("X"):
            prefix = prefix[:-1]
        out.add(prefix)
    return out


def expand_all(codes: Iterable[str]) -> set[str]:
    out: set[str] = set()
    for c in codes:
        out |= expand_ancestors(c)
    return out


def normalize_codes(
    rows: Iterable[tuple[str, object]],
    mapping: Mapping | None = None,
    strict: bool = True,
    skipped: Counter | None = None,
) -> set[str]:
    """Normalize (code, version) rows and expand ancestors.

    With ``strict=False`` malformed or unmappable codes are skipped and
    tallied into ``skipped`` by exception class name.
    """
    out: set[str] = set()
    for raw, version in rows:
        try:
            codes = normalize(raw, version, mapping)
        except (MalformedCode, UnmappableIcd9) as exc:
            if strict:
                raise
            if skipped is not None:
                skipped[type(exc).__name__] += 1
            continue
        out |= expand_all(codes)
    return out


@dataclass(frozen=True)
class Chapter:
    id: str
    number: int
    start: str
    end: str
    title: str

    def contains(self, prefix: str) -> bool:
        return self.start <= prefix <= self.end

    def __str__(self):
        return self.id


# Ranges follow the ICD-10-CM tabular list, widened over the unused gaps so
# that every letter-digit-digit prefix falls in exactly one chapter.
CHAPTERS: tuple[Chapter, ...] = (
    Chapter("I", 1, "A00", "B99", "Certain infectious and parasitic diseases"),
    Chapter("II", 2, "C00", "D49", "Neoplasms"),
    Chapter("III", 3, "D50", "D99", "Diseases of the blood and blood-forming organs and certain disorders involving the immune mechanism"),
    Chapter("IV", 4, "E00", "E99", "Endocrine, nutritional and metabolic diseases"),
    Chapter("V", 5, "F00", "F99", "Mental, behavioral and neurodevelopmental disorders"),
    Chapter("VI", 6, "G00", "G99", "Diseases of the nervous system"),
    Chapter("VII", 7, "H00", "H59", "Diseases of the eye and adnexa"),
    Chapter("VIII", 8, "H60", "H99", "Diseases of the ear and mastoid process"),
    Chapter("IX", 9, "I00", "I99", "Diseases of the circulatory system"),
    Chapter("X", 10, "J00", "J99", "Diseases of the respiratory system"),
    Chapter("XI", 11, "K00", "K99", "Diseases of the digestive system"),
    Chapter("XII", 12, "L00", "L99", "Diseases of the skin and subcutaneous tissue"),
    Chapter("XIII", 13, "M00", "M99", "Diseases of the musculoskeletal system and connective tissue"),
    Chapter("XIV", 14, "N00", "N99", "Diseases of the genitourinary system"),
    Chapter("XV", 15, "O00", "O99", "Pregnancy, childbirth and the puerperium"),
    Chapter("XVI", 16, "P00", "P99", "Certain conditions originating in the perinatal period"),
    Chapter("XVII", 17, "Q00", "Q99", "Congenital malformations, deformations and chromosomal abnormalities"),
    Chapter("XVIII", 18, "R00", "R99", "Symptoms, signs and abnormal clinical and laboratory findings, not elsewhere classified"),
    Chapter("XIX", 19, "S00", "T99", "Injury, poisoning and certain other consequences of external causes"),
    Chapter("XXII", 22, "U00", "U99", "Codes for special purposes"),
    Chapter("XX", 20, "V00", "Y99", "External causes of morbidity"),
    Chapter("XXI", 21, "Z00", "Z99", "Factors influencing health status and contact with health services"),
)
CHAPTERS_BY_ID = {c.id: c for c in CHAPTERS}
_STARTS = [c.start for c in CHAPTERS]


def chapter_of(code: str) -> Chapter:
    prefix = str(code).strip().upper().replace(".", "")[:3]
    if len(prefix) < 3 or not prefix[0].isalpha() or not prefix.isalnum():
        raise OutOfRange(f"no chapter for {code!r}")
    pos = bisect.bisect_right(_STARTS, prefix) - 1
    if pos < 0:
        raise OutOfRange(f"no chapter for {code!r}")
    chapter = CHAPTERS[pos]
    # letters past the chapter's last letter (only possible if the table had gaps)
    if prefix[0] > chapter.end[0]:
        raise OutOfRange(f"no chapter for {code!r}")
    return chapter


def chapter_sort_key(chapter_id: str) -> int:
    return CHAPTERS_BY_ID[chapter_id].number


@dataclass(frozen=True)
class LabelSet:
    """Training vocabulary: lexicographically ordered codes with column ids."""

    codes: tuple[str, ...]
    threshold: int = 0
    counts: Mapping[str, int] = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        codes = tuple(self.codes)
        if list(codes) != sorted(set(codes)):
            raise ValueError("LabelSet codes must be unique and sorted")
        object.__setattr__(self, "codes", codes)
        object.__setattr__(self, "index", MappingProxyType({c: i for i, c in enumerate(codes)}))
        object.__setattr__(self, "counts", MappingProxyType(dict(self.counts)))

    def __len__(self):
        return len(self.codes)

    def __iter__(self):
        return iter(self.codes)

    def __contains__(self, code):
        return code in self.index

    def to_dict(self) -> dict:
        return {"codes": list(self.codes), "threshold": self.threshold,
                "counts": {c: int(self.counts[c]) for c in self.codes if c in self.counts}}

    @classmethod
    def from_dict(cls, d: dict) -> "LabelSet":
        return cls(tuple(d["codes"]), int(d.get("threshold", 0)), d.get("counts", {}))

    def fingerprint(self) -> str:
        import hashlib

        return hashlib.sha256("\n".join(self.codes).encode()).hexdigest()[:16]


def count_codes(code_sets: Iterable[Iterable[str]]) -> Counter:
    """One count per (record, code) pair; duplicates inside a record collapse."""
    counts: Counter = Counter()
    for codes in code_sets:
        counts.update(set(codes))
    return counts


def select_label_set(annotations, threshold: int) -> LabelSet:
    """Keep codes occurring at least ``threshold`` times.

    ``annotations`` is either a mapping code -> count or a flat iterable of
    codes (the multiset of per-record, already de-duplicated annotations).
    """
    if isinstance(annotations, Mapping):
        counts = Counter(dict(annotations))
    else:
        counts = Counter(annotations)
    kept = sorted(c for c, n in counts.items() if n >= threshold)
    if not kept:
        raise EmptyLabelSet(f"no code reaches the count threshold {threshold}")
    return LabelSet(tuple(kept), threshold, {c: counts[c] for c in kept})


def load_descriptions(path) -> dict[str, str]:
    """Optional ``code<TAB>description`` file for report tables."""
    out = {}
    if path is None or not Path(path).exists():
        return out
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.reader(fh, delimiter="\t"):
            if not row or row[0].startswith("#") or len(row) < 2:
                continue
            out[_clean(row[0])] = row[1].strip()
    return out
