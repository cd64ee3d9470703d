"""Multi-label evaluation: AUROC, bootstrap intervals, paired comparison,
crop-averaged scoring, coverage tables, prevalence and label MCC."""
from __future__ import annotations

import csv
import io
import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .exceptions import AllUndefined, BadLengthWarning, RecordTooShort, ShapeMismatch
from .icd import chapter_of

BOOT_BLOCK = 50


# -- AUROC ----------------------------------------------------------------------

def midranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing the average rank."""
    x = np.asarray(x)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    n = len(xs)
    # tie groups as [start, end) runs in sorted order
    boundary = np.flatnonzero(np.concatenate(([True], xs[1:] != xs[:-1], [True])))
    starts, ends = boundary[:-1], boundary[1:]
    avg = (starts + ends + 1) / 2.0  # mean of ranks start+1 .. end
    ranks = np.empty(n, dtype=np.float64)
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC with half credit for ties; NaN when one class is absent."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ShapeMismatch(f"{s.shape[0]} scores vs {y.shape[0]} labels")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        return math.nan
    r = midranks(s)
    u = r[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auroc_pairs(scores, labels) -> float:
    """O(n^2) pair-counting AUROC, kept as a reference implementation."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    pos, neg = s[y], s[~y]
    if len(pos) == 0 or len(neg) == 0:
        return math.nan
    wins = 0.0
    for p in pos:
        wins += np.count_nonzero(p > neg) + 0.5 * np.count_nonzero(p == neg)
    return wins / (len(pos) * len(neg))


def _as_matrix(P, Y):
    P = np.asarray(P, dtype=np.float64)
    Y = np.asarray(Y)
    if P.ndim == 1:
        P = P[:, None]
    if Y.ndim == 1:
        Y = Y[:, None]
    if P.shape != Y.shape:
        raise ShapeMismatch(f"predictions {P.shape} vs labels {Y.shape}")
    if not np.isfinite(P).all():
        raise ShapeMismatch("predictions contain non-finite values")
    return P, Y.astype(bool)


def per_label_auroc(P, Y) -> np.ndarray:
    P, Y = _as_matrix(P, Y)
    return np.array([auroc(P[:, j], Y[:, j]) for j in range(P.shape[1])])


@dataclass
class MacroResult:
    macro: float
    per_label: np.ndarray
    skipped: list  # column indices with an undefined AUROC


def macro_auroc(P, Y) -> MacroResult:
    """Unweighted mean over labels whose AUROC is defined."""
    per = per_label_auroc(P, Y)
    ok = ~np.isnan(per)
    if not ok.any():
        raise AllUndefined("every label is single-class; macro AUROC undefined")
    return MacroResult(float(per[ok].mean()), per, np.flatnonzero(~ok).tolist())


# -- bootstrap -------------------------------------------------------------------

class _LabelLevels:
    """Scores of one label compressed to sorted distinct levels."""

    __slots__ = ("levels", "y", "k")

    def __init__(self, scores, y):
        _, self.levels = np.unique(scores, return_inverse=True)
        self.levels = self.levels.astype(np.int64)
        self.y = y.astype(np.float64)
        self.k = int(self.levels.max()) + 1 if len(self.levels) else 0

    def resampled_auroc(self, idx: np.ndarray) -> np.ndarray:
        """AUROC for each row of a (B, n) index matrix; NaN if single-class.

        Equals :func:`auroc` on the explicitly resampled vectors: per score
        level, count sampled positives/negatives, then
        U = sum_k pos_k * (neg strictly below k + neg_k / 2).
        """
        B = idx.shape[0]
        flat = (np.arange(B)[:, None] * self.k + self.levels[idx]).ravel()
        yy = self.y[idx].ravel()
        pos = np.bincount(flat, weights=yy, minlength=B * self.k).reshape(B, self.k)
        tot = np.bincount(flat, minlength=B * self.k).reshape(B, self.k).astype(np.float64)
        neg = tot - pos
        below = np.cumsum(neg, axis=1) - neg
        u = (pos * (below + 0.5 * neg)).sum(axis=1)
        n_pos = pos.sum(axis=1)
        n_neg = neg.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            out = u / (n_pos * n_neg)
        out[(n_pos == 0) | (n_neg == 0)] = np.nan
        return out


def bootstrap_indices(n: int, n_boot: int, seed: int, block: int = BOOT_BLOCK):
    """Yield (first_iteration, index matrix) blocks.

    Block ``b`` draws from ``default_rng([seed, b])`` so the stream does not
    depend on how blocks are scheduled across workers.
    """
    for b, start in enumerate(range(0, n_boot, block)):
        size = min(block, n_boot - start)
        rng = np.random.default_rng([seed, b])
        yield start, rng.integers(0, n, size=(size, n))


def bootstrap_distribution(P, Y, n_boot: int = 1000, seed: int = 0, n_jobs: int = 1,
                           indices: np.ndarray | None = None) -> np.ndarray:
    """Per-label AUROC over bootstrap resamples of the rows, shape (n_boot, labels).

    ``indices`` overrides the random draws with an explicit (n_boot, n) matrix.
    """
    P, Y = _as_matrix(P, Y)
    levels = [_LabelLevels(P[:, j], Y[:, j]) for j in range(P.shape[1])]
    if indices is not None:
        indices = np.asarray(indices, dtype=np.int64)
        blocks = [(0, indices)]
        n_boot = len(indices)
    else:
        blocks = list(bootstrap_indices(len(P), n_boot, seed))
    out = np.empty((n_boot, P.shape[1]))

    def run(block):
        start, idx = block
        for j, lv in enumerate(levels):
            out[start:start + len(idx), j] = lv.resampled_auroc(idx)

    if n_jobs == 1 or len(blocks) == 1:
        for blk in blocks:
            run(blk)
    else:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            list(pool.map(run, blocks))
    return out


def _nanmean_rows(dist: np.ndarray) -> np.ndarray:
    ok = ~np.isnan(dist)
    cnt = ok.sum(axis=1)
    tot = np.where(ok, dist, 0.0).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        m = tot / cnt
    m[cnt == 0] = np.nan
    return m


def _interval(dist: np.ndarray, point, alpha: float, method: str):
    """Percentile (default) or basic bootstrap interval along axis 0, ignoring NaN."""
    dist = np.asarray(dist, dtype=np.float64)
    squeeze = dist.ndim == 1
    if squeeze:
        dist = dist[:, None]
    point = np.atleast_1d(np.asarray(point, dtype=np.float64))
    lo = np.full(dist.shape[1], np.nan)
    hi = np.full(dist.shape[1], np.nan)
    for j in range(dist.shape[1]):
        col = dist[:, j]
        col = col[~np.isnan(col)]
        if len(col):
            lo[j], hi[j] = np.quantile(col, [alpha / 2, 1 - alpha / 2])
    if method == "basic":
        lo, hi = 2 * point - hi, 2 * point - lo
    elif method != "percentile":
        raise ValueError(f"unknown interval method {method!r}")
    if squeeze:
        return float(lo[0]), float(hi[0])
    return lo, hi


@dataclass
class BootstrapResult:
    point: np.ndarray
    low: np.ndarray
    high: np.ndarray
    macro: float
    macro_low: float
    macro_high: float
    n_boot: int
    seed: int
    alpha: float
    method: str
    skipped: list = field(default_factory=list)


def bootstrap_ci(P, Y, n_boot: int = 1000, alpha: float = 0.05, seed: int = 0,
                 n_jobs: int = 1, method: str = "percentile",
                 indices: np.ndarray | None = None) -> BootstrapResult:
    """Row-resampling bootstrap intervals for per-label and macro AUROC."""
    if n_boot < 1 and indices is None:
        raise ValueError("n_boot must be >= 1")
    point = macro_auroc(P, Y)
    dist = bootstrap_distribution(P, Y, n_boot, seed, n_jobs, indices)
    lo, hi = _interval(dist, point.per_label, alpha, method)
    mlo, mhi = _interval(_nanmean_rows(dist), point.macro, alpha, method)
    return BootstrapResult(point.per_label, lo, hi, point.macro, mlo, mhi, len(dist), seed,
                           alpha, method, point.skipped)


@dataclass
class PairedResult:
    diff: np.ndarray
    low: np.ndarray
    high: np.ndarray
    significant: np.ndarray
    macro_diff: float
    macro_low: float
    macro_high: float
    macro_significant: bool
    n_boot: int
    seed: int

    @property
    def n_better_a(self) -> int:
        return int(np.sum(self.significant & (self.low > 0)))

    @property
    def n_better_b(self) -> int:
        return int(np.sum(self.significant & (self.high < 0)))


def paired_significance(P_a, P_b, Y, n_boot: int = 1000, seed: int = 0, alpha: float = 0.05,
                        n_jobs: int = 1, method: str = "percentile") -> PairedResult:
    """Bootstrap the AUROC difference A - B on shared resamples.

    A label is significant when the interval for the difference excludes 0.
    """
    P_a, Y = _as_matrix(P_a, Y)
    P_b, _ = _as_matrix(P_b, Y)
    if P_a.shape != P_b.shape:
        raise ShapeMismatch(f"model outputs differ in shape: {P_a.shape} vs {P_b.shape}")
    pa, pb = per_label_auroc(P_a, Y), per_label_auroc(P_b, Y)
    ok = ~np.isnan(pa)
    if not ok.any():
        raise AllUndefined("every label is single-class")
    da = bootstrap_distribution(P_a, Y, n_boot, seed, n_jobs)
    db = bootstrap_distribution(P_b, Y, n_boot, seed, n_jobs)
    diff_point = pa - pb
    lo, hi = _interval(da - db, diff_point, alpha, method)
    sig = (lo > 0) | (hi < 0)
    macro_point = float(pa[ok].mean() - pb[ok].mean())
    mlo, mhi = _interval(_nanmean_rows(da) - _nanmean_rows(db), macro_point, alpha, method)
    return PairedResult(diff_point, lo, hi, sig, macro_point, mlo, mhi,
                        bool(mlo > 0 or mhi < 0), n_boot, seed)


# -- crop-averaged scoring -----------------------------------------------------------

def crop_average(model: Callable, X, crop_len: int = 250, n_crops: int = 4,
                 batch_size: int = 256) -> np.ndarray:
    """Mean post-sigmoid output over the non-overlapping crops of each record.

    Records must hold ``n_crops * crop_len`` samples; other lengths fall back
    to ``floor(len / crop_len)`` crops with a warning.
    """
    import torch

    X = np.asarray(X)
    if X.ndim == 2:
        X = X[None]
    T = X.shape[-1]
    if T != n_crops * crop_len:
        n_fit = T // crop_len
        warnings.warn(f"record length {T} is not {n_crops} x {crop_len}; averaging {n_fit} crop(s)",
                      BadLengthWarning, stacklevel=2)
        n_crops = n_fit
    if n_crops < 1:
        raise RecordTooShort(f"record length {T} shorter than one crop of {crop_len}")
    if isinstance(model, torch.nn.Module):
        model.eval()
        dtype = next(model.parameters()).dtype
    else:
        dtype = torch.float32
    chunks = []
    with torch.no_grad():
        for b in range(0, len(X), batch_size):
            xb = X[b:b + batch_size]
            total = None
            for c in range(n_crops):
                crop = torch.as_tensor(np.ascontiguousarray(xb[..., c * crop_len:(c + 1) * crop_len]),
                                       dtype=dtype)
                prob = torch.sigmoid(model(crop)).double().cpu().numpy()
                total = prob if total is None else total + prob
            chunks.append(total / n_crops)
    return np.concatenate(chunks) if chunks else np.empty((0, 0))


# -- prevalence / correlation ---------------------------------------------------

def prevalence(Y) -> np.ndarray:
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    return Y.mean(axis=0)


def mcc_matrix(Y) -> np.ndarray:
    """Matthews correlation between every pair of label columns (NaN if degenerate)."""
    Y = np.asarray(Y, dtype=np.float64)
    n = Y.shape[0]
    n11 = Y.T @ Y
    n1 = Y.sum(axis=0)
    n0 = n - n1
    n10 = n1[:, None] - n11
    n01 = n1[None, :] - n11
    n00 = n - n11 - n10 - n01
    num = n11 * n00 - n10 * n01
    den = np.sqrt(np.outer(n1 * n0, n1 * n0))
    with np.errstate(invalid="ignore", divide="ignore"):
        out = num / den
    out[den == 0] = np.nan
    defined = (n1 > 0) & (n0 > 0)
    out[np.diag_indices_from(out)] = np.where(defined, 1.0, np.nan)
    return out


def top_correlations(mcc: np.ndarray, codes: Sequence[str], k: int = 20,
                     exclude_ancestors: bool = True) -> list[tuple[str, str, float]]:
    """Largest off-diagonal MCC pairs, optionally dropping code/ancestor pairs."""
    iu, ju = np.triu_indices(len(codes), k=1)
    vals = mcc[iu, ju]
    order = np.argsort(-np.nan_to_num(vals, nan=-np.inf), kind="mergesort")
    out = []
    for p in order:
        a, b = codes[iu[p]], codes[ju[p]]
        if np.isnan(vals[p]):
            break
        if exclude_ancestors and (a.startswith(b) or b.startswith(a)):
            continue
        out.append((a, b, float(vals[p])))
        if len(out) == k:
            break
    return out


# -- reports ----------------------------------------------------------------------

@dataclass
class LabelResult:
    code: str
    auroc: float
    ci_low: float
    ci_high: float
    prevalence: float
    n_pos: int
    description: str = ""


REPORT_COLUMNS = ("code", "description", "auroc", "ci_low", "ci_high", "prevalence", "n_pos")


@dataclass
class EvalReport:
    labels: list  # LabelResult
    macro: float
    macro_low: float
    macro_high: float
    skipped: list  # codes with undefined AUROC
    seed: int
    n_boot: int
    alpha: float = 0.05
    method: str = "percentile"
    scenario: str = ""

    @property
    def codes(self) -> list[str]:
        return [r.code for r in self.labels]

    def by_code(self) -> dict:
        return {r.code: r for r in self.labels}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["labels"] = [_clean_floats(asdict(r)) for r in self.labels]
        return _clean_floats(d)

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    @classmethod
    def from_json(cls, path) -> "EvalReport":
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        labels = [LabelResult(**{k: (math.nan if v is None and k != "description" else v)
                                 for k, v in r.items()}) for r in d.pop("labels")]
        d = {k: (math.nan if v is None and k.startswith("macro") else v) for k, v in d.items()}
        return cls(labels=labels, **d)

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in self.labels:
            w.writerow([r.code, r.description, _fmt(r.auroc), _fmt(r.ci_low), _fmt(r.ci_high),
                        _fmt(r.prevalence), r.n_pos])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    @classmethod
    def from_csv(cls, path, **kwargs) -> "EvalReport":
        """Per-code table with at least ``code,auroc,prevalence`` columns."""
        rows = []
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                rows.append(LabelResult(
                    row["code"], _num(row.get("auroc")), _num(row.get("ci_low")),
                    _num(row.get("ci_high")), _num(row.get("prevalence")),
                    int(row["n_pos"]) if row.get("n_pos") not in (None, "") else 0,
                    row.get("description", "") or ""))
        vals = np.array([r.auroc for r in rows])
        ok = ~np.isnan(vals)
        macro = float(vals[ok].mean()) if ok.any() else math.nan
        defaults = dict(macro_low=math.nan, macro_high=math.nan, seed=-1, n_boot=0)
        defaults.update(kwargs)
        return cls(rows, macro, skipped=[r.code for r in rows if math.isnan(r.auroc)], **defaults)


def _num(v):
    if v is None or str(v).strip() == "":
        return math.nan
    return float(v)


def _fmt(v) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def _clean_floats(obj):
    if isinstance(obj, float) and math.isnan(obj):
        return None
    if isinstance(obj, dict):
        return {k: _clean_floats(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_clean_floats(v) for v in obj]
    if isinstance(obj, np.generic):
        return _clean_floats(obj.item())
    return obj


def evaluate(P, Y, codes: Sequence[str], n_boot: int = 1000, seed: int = 0, alpha: float = 0.05,
             n_jobs: int = 1, method: str = "percentile", descriptions: Mapping | None = None,
             scenario: str = "") -> EvalReport:
    """Point estimates, bootstrap intervals and prevalence for every label."""
    P, Yb = _as_matrix(P, Y)
    if len(codes) != P.shape[1]:
        raise ShapeMismatch(f"{len(codes)} codes for {P.shape[1]} columns")
    res = bootstrap_ci(P, Yb, n_boot, alpha, seed, n_jobs, method)
    prev = prevalence(Yb)
    npos = Yb.sum(axis=0)
    descriptions = descriptions or {}
    labels = [LabelResult(c, float(res.point[j]), float(res.low[j]), float(res.high[j]),
                          float(prev[j]), int(npos[j]), descriptions.get(c, ""))
              for j, c in enumerate(codes)]
    return EvalReport(labels, res.macro, res.macro_low, res.macro_high,
                      [codes[j] for j in res.skipped], seed, res.n_boot, alpha, method, scenario)


# -- coverage tables --------------------------------------------------------------------

@dataclass(frozen=True)
class CoverageRow:
    chapter: str
    code3: str
    covered: int
    total: int
    prevalence: float
    description: str = ""

    @property
    def coverage(self) -> str:
        return f"{self.covered}/{self.total}"

    @property
    def fraction(self) -> float:
        return self.covered / self.total


COVERAGE_COLUMNS = ("chapter", "code", "coverage", "prevalence", "description")


def coverage_table(report: EvalReport, threshold: float, direction: str = "above",
                   descriptions: Mapping | None = None, only_covered: bool = False) -> list[CoverageRow]:
    """Group labels by 3-character category and count members past the threshold.

    ``direction="above"`` counts AUROC > threshold, ``"below"`` counts
    AUROC < threshold. A category's prevalence is that of the 3-character
    code itself. Rows are ordered by chapter, prevalence (descending), code.
    """
    if direction not in ("above", "below"):
        raise ValueError("direction must be 'above' or 'below'")
    groups: dict[str, list[LabelResult]] = {}
    for r in report.labels:
        groups.setdefault(r.code[:3], []).append(r)
    descriptions = descriptions or {}
    rows = []
    for code3, members in groups.items():
        vals = np.array([m.auroc for m in members], dtype=np.float64)
        with np.errstate(invalid="ignore"):
            hit = vals > threshold if direction == "above" else vals < threshold
        covered = int(np.sum(hit & ~np.isnan(vals)))
        own = [m for m in members if m.code == code3]
        head = own[0] if own else max(members, key=lambda m: m.prevalence)
        desc = descriptions.get(code3) or head.description
        rows.append(CoverageRow(chapter_of(code3).id, code3, covered, len(members),
                                float(head.prevalence), desc))
    if only_covered:
        rows = [r for r in rows if r.covered > 0]
    return sorted(rows, key=_coverage_key)


def _coverage_key(row: CoverageRow):
    from .icd import chapter_sort_key

    return (chapter_sort_key(row.chapter), -row.prevalence, row.code3)


def coverage_csv(rows: Sequence[CoverageRow], path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COVERAGE_COLUMNS)
    for r in rows:
        w.writerow([r.chapter, r.code3, r.coverage, f"{r.prevalence:.3f}", r.description])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def chapter_macro_auroc(report: EvalReport) -> list[tuple[str, float, int]]:
    """(chapter, macro AUROC, n labels) sorted by macro AUROC, highest first."""
    per: dict[str, list[float]] = {}
    for r in report.labels:
        if not math.isnan(r.auroc):
            per.setdefault(chapter_of(r.code).id, []).append(r.auroc)
    out = [(ch, float(np.mean(v)), len(v)) for ch, v in per.items()]
    return sorted(out, key=lambda t: (-t[1], t[0]))
