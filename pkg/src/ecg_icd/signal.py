"""ECG waveform preprocessing: gap repair, resampling to 100 Hz, amplitude clip.

Signals are ``(n_leads, n_samples)`` float arrays in millivolts; NaN marks a
missing sample.
"""
from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import DataError, EmptySignal

logger = logging.getLogger(__name__)

STANDARD_LEADS = ("I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6")
TARGET_FS = 100.0
CLIP_MV = 3.0

MAGIC = b"ECG1"
_HEADER = struct.Struct("<4sIIf")


@dataclass(frozen=True)
class RawEcg:
    samples: np.ndarray
    fs: float
    leads: tuple[str, ...] = STANDARD_LEADS
    # leads that were entirely missing and got zero-filled
    all_missing: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[None, :]
        if arr.ndim != 2:
            raise DataError(f"samples must be (leads, n); got shape {arr.shape}")
        if not self.fs > 0:
            raise DataError(f"sampling rate must be positive, got {self.fs}")
        leads = tuple(self.leads)
        if len(leads) != arr.shape[0]:
            if self.leads is STANDARD_LEADS:
                leads = tuple(f"L{i}" for i in range(arr.shape[0]))
            else:
                raise DataError(f"{len(leads)} lead names for {arr.shape[0]} leads")
        object.__setattr__(self, "samples", arr)
        object.__setattr__(self, "leads", leads)
        object.__setattr__(self, "fs", float(self.fs))

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.n_samples / self.fs


def fill_missing(sig: RawEcg) -> RawEcg:
    """Linear interpolation across interior gaps, zeros at the boundaries.

    A lead with no finite sample at all becomes all zeros and is listed in
    ``all_missing``.
    """
    x = sig.samples.copy()
    n = x.shape[1]
    grid = np.arange(n)
    empty = []
    for i, lead in enumerate(x):
        ok = np.isfinite(lead)
        if ok.all():
            continue
        if not ok.any():
            x[i] = 0.0
            empty.append(sig.leads[i])
            continue
        known = grid[ok]
        # left=0/right=0 zero-fills the leading and trailing runs
        x[i] = np.where(ok, lead, np.interp(grid, known, lead[ok], left=0.0, right=0.0))
    if empty:
        logger.warning("%d lead(s) entirely missing, zero-filled: %s", len(empty), ", ".join(empty))
    return replace(sig, samples=x, all_missing=sig.all_missing + tuple(empty))


def resampled_length(n: int, fs_in: float, fs_out: float) -> int:
    return int(round(n * fs_out / fs_in))


def _antialias(x: np.ndarray, fs_in: float, fs_out: float) -> np.ndarray:
    from scipy.signal import filtfilt, firwin

    numtaps = 101
    if x.shape[1] <= 3 * numtaps:
        return x
    taps = firwin(numtaps, 0.9 * (fs_out / 2), fs=fs_in)
    return filtfilt(taps, [1.0], x, axis=1)


def resample(sig: RawEcg, fs_out: float = TARGET_FS, antialias: bool = False) -> RawEcg:
    """Linear interpolation onto the grid ``j / fs_out``.

    Output times past the last input sample take the last value.
    """
    if sig.n_samples == 0:
        raise EmptySignal("cannot resample an empty signal")
    if not fs_out > 0:
        raise DataError(f"fs_out must be positive, got {fs_out}")
    if not np.isfinite(sig.samples).all():
        raise DataError("resample needs finite samples; run fill_missing first")
    if sig.fs == fs_out:
        return sig
    n_out = resampled_length(sig.n_samples, sig.fs, fs_out)
    if n_out == 0:
        raise EmptySignal(f"{sig.n_samples} samples at {sig.fs} Hz leave nothing at {fs_out} Hz")
    x = sig.samples
    if antialias and fs_out < sig.fs:
        x = _antialias(x, sig.fs, fs_out)
    # position of each output sample in input-sample units
    pos = np.arange(n_out) * (sig.fs / fs_out)
    lo = np.minimum(np.floor(pos).astype(np.int64), sig.n_samples - 1)
    hi = np.minimum(lo + 1, sig.n_samples - 1)
    frac = np.clip(pos - lo, 0.0, 1.0)
    out = x[:, lo] + frac * (x[:, hi] - x[:, lo])
    # exact grid hits must not pick up rounding from the blend
    exact = frac == 0.0
    out[:, exact] = x[:, lo[exact]]
    return replace(sig, samples=out, fs=float(fs_out))


def clip(sig: RawEcg, limit: float = CLIP_MV) -> RawEcg:
    return replace(sig, samples=np.clip(sig.samples, -limit, limit))


def preprocess(sig: RawEcg, fs_out: float = TARGET_FS, limit: float = CLIP_MV,
               antialias: bool = False) -> RawEcg:
    """fill_missing -> resample -> clip."""
    return clip(resample(fill_missing(sig), fs_out, antialias=antialias), limit)


class EcgPreprocessor(BaseEstimator, TransformerMixin):
    """Stateless transformer wrapping :func:`preprocess` for batches.

    ``transform`` takes a ``(n_records, n_leads, n_samples)`` array sampled at
    ``fs_in`` and returns ``(n_records, n_leads, n_out)`` at ``fs_out``.
    """

    def __init__(self, fs_in=500.0, fs_out=TARGET_FS, clip_mv=CLIP_MV, antialias=False):
        self.fs_in = fs_in
        self.fs_out = fs_out
        self.clip_mv = clip_mv
        self.antialias = antialias

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 3:
            raise DataError(f"expected (records, leads, samples), got shape {X.shape}")
        self.n_leads_in_ = X.shape[1]
        self.n_samples_out_ = resampled_length(X.shape[2], self.fs_in, self.fs_out)
        return self

    def transform(self, X):
        from sklearn.utils.validation import check_is_fitted

        check_is_fitted(self, "n_leads_in_")
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 3 or X.shape[1] != self.n_leads_in_:
            raise DataError(f"expected (records, {self.n_leads_in_}, samples), got {X.shape}")
        out = [preprocess(RawEcg(rec, self.fs_in), self.fs_out, self.clip_mv, self.antialias).samples
               for rec in X]
        return np.stack(out) if out else np.empty((0, X.shape[1], 0))


# -- signal payload I/O -------------------------------------------------------

def write_ecg1(path, samples: np.ndarray, fs: float) -> None:
    """Little-endian float32, lead-major, behind a 16-byte header."""
    arr = np.ascontiguousarray(samples, dtype="<f4")
    if arr.ndim != 2:
        raise DataError("ECG1 payload must be (leads, samples)")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, arr.shape[0], arr.shape[1], float(fs)))
        fh.write(arr.tobytes())


def read_ecg1(path) -> tuple[np.ndarray, float]:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise DataError(f"{path}: truncated ECG1 header")
    magic, n_leads, n_samples, fs = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    expected = _HEADER.size + 4 * n_leads * n_samples
    if len(data) != expected:
        raise DataError(f"{path}: expected {expected} bytes, found {len(data)}")
    arr = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(n_leads, n_samples)
    return arr.astype(np.float64), float(fs)


def read_csv_signal(path, fs: float) -> RawEcg:
    """One column per lead with a header row; empty fields are missing."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) if v.strip() else np.nan for v in row] for row in reader if row]
    arr = np.array(rows, dtype=np.float64).T if rows else np.empty((len(header), 0))
    return RawEcg(arr, fs, tuple(h.strip() for h in header))


def load_signal(path, fs: float | None = None) -> RawEcg:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        if fs is None:
            raise DataError(f"{path}: CSV signals need the sampling rate from the manifest")
        return read_csv_signal(path, fs)
    arr, file_fs = read_ecg1(path)
    if fs is not None and abs(fs - file_fs) > 1e-6:
        raise DataError(f"{path}: manifest fs {fs} != payload fs {file_fs}")
    return RawEcg(arr, file_fs)
