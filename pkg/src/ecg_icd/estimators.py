"""scikit-learn style wrappers: a multi-label ICD encoder and the two ECG classifiers."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import icd
from .evaluation import crop_average, macro_auroc
from .exceptions import ShapeMismatch
from .models.config import S4, XRESNET1D, preset
from .trainer import TrainConfig, fit_arrays


class IcdLabelEncoder(TransformerMixin, BaseEstimator):
    """Map per-record code lists to a binary matrix over the selected label set.

    Each sample is an iterable of raw codes, either ICD-10 strings or
    ``(code, version)`` pairs. Codes are normalized and ancestor-expanded
    before counting; ``fit`` keeps codes seen in at least ``threshold`` records.
    """

    def __init__(self, threshold=1, mapping=None):
        self.threshold = threshold
        self.mapping = mapping

    def _expand(self, sample) -> set:
        rows = [(c, icd.ICD10) if isinstance(c, str) else tuple(c) for c in sample]
        return icd.normalize_codes(rows, self.mapping, strict=True)

    def fit(self, X, y=None):
        self.label_set_ = icd.select_label_set(icd.count_codes(self._expand(s) for s in X), self.threshold)
        self.classes_ = np.array(self.label_set_.codes)
        return self

    def transform(self, X):
        check_is_fitted(self, "label_set_")
        idx = self.label_set_.index
        out = np.zeros((len(X), len(idx)), dtype=np.uint8)
        for i, sample in enumerate(X):
            cols = [idx[c] for c in self._expand(sample) if c in idx]
            out[i, cols] = 1
        return out

    def inverse_transform(self, Y):
        check_is_fitted(self, "label_set_")
        Y = np.asarray(Y)
        return [tuple(self.classes_[np.flatnonzero(row)]) for row in Y]


def _check_signals(X, n_leads=None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise ShapeMismatch(f"expected (records, leads, time) signals, got shape {X.shape}")
    if not np.isfinite(X).all():
        raise ShapeMismatch("signals contain non-finite values; run the preprocessor first")
    if n_leads is not None and X.shape[1] != n_leads:
        raise ShapeMismatch(f"fitted on {n_leads} leads, got {X.shape[1]}")
    return X


def _check_targets(Y, n) -> np.ndarray:
    Y = np.asarray(Y)
    if Y.ndim == 1:
        Y = Y[:, None]
    if Y.shape[0] != n:
        raise ShapeMismatch(f"{n} signals but {Y.shape[0]} target rows")
    if not np.isin(Y, (0, 1)).all():
        raise ShapeMismatch("targets must be binary")
    return Y.astype(np.uint8)


class _EcgClassifier(ClassifierMixin, BaseEstimator):
    _family: str = ""

    def _model_overrides(self) -> dict:
        return {}

    def fit(self, X, Y, X_val=None, Y_val=None):
        """Train with crop sampling and keep the best epoch on validation data.

        Without ``X_val``, a seeded ``validation_fraction`` of the rows is held out.
        """
        X = _check_signals(X)
        Y = _check_targets(Y, len(X))
        if X_val is None:
            rng = np.random.default_rng(self.seed)
            order = rng.permutation(len(X))
            n_val = max(1, int(round(self.validation_fraction * len(X))))
            val, tr = order[:n_val], order[n_val:]
            X, X_val, Y, Y_val = X[tr], X[val], Y[tr], Y[val]
        else:
            X_val = _check_signals(X_val, X.shape[1])
            Y_val = _check_targets(Y_val, len(X_val))
        self.model_config_ = preset(self._family, self.preset, in_leads=X.shape[1], n_labels=Y.shape[1],
                                    input_len=self.crop_len, seed=self.seed, dropout=self.dropout,
                                    **self._model_overrides())
        train_cfg = TrainConfig(lr=self.lr, weight_decay=self.weight_decay, epochs=self.epochs,
                                batch_size=self.batch_size, crop_len=self.crop_len,
                                n_eval_crops=self.n_eval_crops, seed=self.seed, threads=self.threads)
        result = fit_arrays(self.model_config_, train_cfg, X, Y, X_val, Y_val)
        self.checkpoint_ = result.checkpoint
        self.model_ = result.model
        self.log_ = result.log
        self.n_leads_ = X.shape[1]
        self.classes_ = np.arange(Y.shape[1])
        return self

    def predict_proba(self, X):
        """Crop-averaged sigmoid scores, shape (records, labels)."""
        check_is_fitted(self, "model_")
        X = _check_signals(X, self.n_leads_)
        return crop_average(self.model_, X, self.crop_len, self.n_eval_crops)

    def predict(self, X, threshold=0.5):
        return (self.predict_proba(X) >= threshold).astype(np.uint8)

    def score(self, X, Y, sample_weight=None):
        """Macro AUROC over labels with both classes present."""
        if sample_weight is not None:
            raise ValueError("sample weights are not supported")
        return macro_auroc(self.predict_proba(X), Y).macro

    @classmethod
    def from_checkpoint(cls, checkpoint, **params):
        """Wrap a stored checkpoint as a fitted estimator."""
        cfg = checkpoint.config
        tc = checkpoint.metadata.get("train_config", {})
        est = cls(crop_len=tc.get("crop_len", cfg.input_len), n_eval_crops=tc.get("n_eval_crops", 4),
                  **params)
        est.model_config_ = cfg
        est.checkpoint_ = checkpoint
        est.model_ = checkpoint.build()
        est.model_.eval()
        est.log_ = []
        est.n_leads_ = cfg.in_leads
        est.classes_ = np.arange(cfg.n_labels)
        return est


class S4EcgClassifier(_EcgClassifier):
    """Bidirectional diagonal state-space classifier."""

    _family = S4

    def __init__(self, preset="desk", d_model=None, n_layers=None, d_state=None, bidirectional=True,
                 dropout=0.0, lr=1e-3, weight_decay=1e-3, epochs=20, batch_size=32, crop_len=250,
                 n_eval_crops=4, validation_fraction=0.1, seed=0, threads=1):
        self.preset = preset
        self.d_model = d_model
        self.n_layers = n_layers
        self.d_state = d_state
        self.bidirectional = bidirectional
        self.dropout = dropout
        self.lr = lr
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.crop_len = crop_len
        self.n_eval_crops = n_eval_crops
        self.validation_fraction = validation_fraction
        self.seed = seed
        self.threads = threads

    def _model_overrides(self):
        out = {"bidirectional": self.bidirectional}
        for k in ("d_model", "n_layers", "d_state"):
            if getattr(self, k) is not None:
                out[k] = getattr(self, k)
        return out


class XResNetEcgClassifier(_EcgClassifier):
    """XResNet1d50-topology residual CNN classifier."""

    _family = XRESNET1D

    def __init__(self, preset="desk", base_width=None, dropout=0.0, lr=1e-3, weight_decay=1e-3,
                 epochs=100, batch_size=64, crop_len=250, n_eval_crops=4, validation_fraction=0.1,
                 seed=0, threads=1):
        self.preset = preset
        self.base_width = base_width
        self.dropout = dropout
        self.lr = lr
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.crop_len = crop_len
        self.n_eval_crops = n_eval_crops
        self.validation_fraction = validation_fraction
        self.seed = seed
        self.threads = threads

    def _model_overrides(self):
        return {} if self.base_width is None else {"base_width": self.base_width}

