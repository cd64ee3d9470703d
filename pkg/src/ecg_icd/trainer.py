"""Training protocol: random crops, BCE, AdamW, validation macro-AUROC selection."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
import numpy as np
import torch

from . import models
from .evaluation import crop_average, macro_auroc
from .exceptions import AllUndefined, Diverged, EmptySplit, NonFiniteUpdate, RecordTooShort
from .models.checkpoint import ModelCheckpoint
from .models.config import ModelConfig

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-3
    epochs: int = 20
    batch_size: int = 32
    crop_len: int = 250
    n_eval_crops: int = 4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    threads: int = 1
    frozen: tuple = ()

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.crop_len < 1:
            raise ValueError("epochs, batch_size and crop_len must be >= 1")
        object.__setattr__(self, "frozen", tuple(self.frozen))

    def to_dict(self):
        d = asdict(self)
        d["frozen"] = list(self.frozen)
        return d


CNN_PAPER = dict(epochs=100, batch_size=64)
S4_PAPER = dict(epochs=20, batch_size=32)


def sample_crop(record: np.ndarray, crop_len: int, rng: np.random.Generator) -> np.ndarray:
    """Contiguous window with a uniform start shared by all leads."""
    n = record.shape[-1]
    if n < crop_len:
        raise RecordTooShort(f"record has {n} samples, crop needs {crop_len}")
    start = int(rng.integers(0, n - crop_len + 1))
    return record[..., start:start + crop_len]


@dataclass
class AdamWState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adamw_step(params: dict, grads: dict, state: AdamWState, t: int, cfg: TrainConfig) -> tuple[dict, AdamWState]:
    """One decoupled-weight-decay Adam update, applied in place.

    theta <- theta - lr * (mhat / (sqrt(vhat) + eps) + wd * theta)
    """
    if t < 1:
        raise ValueError("AdamW step counter starts at 1")
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            m = state.m.get(name)
            if m is None:
                m = state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            v = state.v[name]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            update = (m / bc1) / (torch.sqrt(v / bc2) + cfg.eps) + cfg.weight_decay * p
            p.sub_(cfg.lr * update)
            if not torch.isfinite(p).all():
                raise NonFiniteUpdate(f"non-finite parameter {name} after step {t}")
    state.step = t
    return params, state


@dataclass
class TrainResult:
    checkpoint: ModelCheckpoint
    log: list
    model: torch.nn.Module


def _snapshot(model, opt_state: AdamWState) -> tuple[dict, dict]:
    params = {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
    opt = {}
    for k in opt_state.m:
        opt[f"m.{k}"] = opt_state.m[k].cpu().numpy().copy()
        opt[f"v.{k}"] = opt_state.v[k].cpu().numpy().copy()
    return params, opt


def fit_arrays(model_cfg: ModelConfig, cfg: TrainConfig, X_train: np.ndarray, Y_train: np.ndarray,
               X_val: np.ndarray, Y_val: np.ndarray, log_path=None, metadata: dict | None = None,
               dtype=torch.float32) -> TrainResult:
    """Train on in-memory arrays and keep the epoch with the best validation macro AUROC.

    ``X_*`` are ``(records, leads, time)``; ``Y_*`` binary ``(records, labels)``.
    Ties between epochs keep the earliest.
    """
    if len(X_train) == 0:
        raise EmptySplit("training split is empty")
    if len(X_val) == 0:
        raise EmptySplit("validation split is empty")
    if X_train.shape[-1] < cfg.crop_len:
        raise RecordTooShort(f"records have {X_train.shape[-1]} samples, crop needs {cfg.crop_len}")
    prev_threads = torch.get_num_threads()
    torch.set_num_threads(max(1, cfg.threads))
    try:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            return _fit(model_cfg, cfg, X_train, Y_train, X_val, Y_val, log_path, metadata or {},
                        dtype)
    finally:
        torch.set_num_threads(prev_threads)


def _validation_score(model, X_val, Y_val, cfg) -> float:
    scores = crop_average(model, X_val, cfg.crop_len, cfg.n_eval_crops)
    try:
        return macro_auroc(scores, Y_val).macro
    except AllUndefined:
        return math.nan


def _fit(model_cfg, cfg, X_train, Y_train, X_val, Y_val, log_path, metadata, dtype):
    rng = np.random.default_rng(cfg.seed)
    model = models.build_model(model_cfg, dtype)
    named = dict(model.named_parameters())
    frozen = tuple(cfg.frozen)
    trainable = {n: p for n, p in named.items() if not models._is_frozen(n, frozen)}
    for n, p in named.items():
        p.requires_grad_(n in trainable)
    opt_state = AdamWState()
    Y_train = np.asarray(Y_train, dtype=np.float32)
    n = len(X_train)
    log, best = [], None
    step = 0
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            model.train()
            order = rng.permutation(n)
            total, seen = 0.0, 0
            for b in range(0, n, cfg.batch_size):
                idx = order[b:b + cfg.batch_size]
                # fresh crop every visit
                crops = np.stack([sample_crop(X_train[i], cfg.crop_len, rng) for i in idx])
                xb = torch.as_tensor(crops, dtype=dtype)
                yb = torch.as_tensor(Y_train[idx], dtype=dtype)
                value = models.loss(model(xb), yb)
                if not torch.isfinite(value):
                    raise Diverged(f"non-finite loss at epoch {epoch}")
                grads = torch.autograd.grad(value, list(trainable.values()))
                step += 1
                adamw_step(trainable, dict(zip(trainable, grads)), opt_state, step, cfg)
                total += float(value.detach()) * len(idx)
                seen += len(idx)
            train_loss = total / seen
            model.eval()
            val = _validation_score(model, X_val, Y_val, cfg)
            entry = {"epoch": epoch, "train_loss": train_loss, "val_macro_auroc": val,
                     "wall_ms": int(round((time.perf_counter() - t0) * 1000))}
            log.append(entry)
            if log_fh:
                log_fh.write(json.dumps(entry) + "\n")
                log_fh.flush()
            logger.info("epoch %d loss %.5f val macro AUROC %.4f", epoch, train_loss, val)
            if best is None or (not math.isnan(val) and (math.isnan(best[1]) or val > best[1])):
                params, opt = _snapshot(model, opt_state)
                best = (epoch, val, params, opt, opt_state.step)
    finally:
        if log_fh:
            log_fh.close()
    epoch, val, params, opt, opt_step = best
    meta = {**metadata, "train_config": cfg.to_dict(), "optimizer_step": opt_step}
    ckpt = ModelCheckpoint(model_cfg, params, opt, epoch, None if math.isnan(val) else val, meta)
    models.set_parameters(model, {k: torch.from_numpy(v) for k, v in params.items()})
    model.eval()
    return TrainResult(ckpt, log, model)


def train(model_cfg: ModelConfig, cfg: TrainConfig, dataset, scenario="T(ED2ALL)-E(ED2ALL)",
          log_path=None, dtype=torch.float32) -> TrainResult:
    """Fit on folds 1-8, select on fold 9 (first ECG per stay), both filtered by
    the scenario's training part."""
    from .dataset import ScenarioSpec, apply_scenario, eval_view

    spec = scenario if isinstance(scenario, ScenarioSpec) else ScenarioSpec.parse(scenario)
    train_ds, val_ds, _ = dataset.split()
    train_ds = apply_scenario(train_ds, spec, "train")
    val_ds = apply_scenario(eval_view(val_ds), spec, "train")
    if len(train_ds) == 0:
        raise EmptySplit(f"no training records for {spec}")
    if len(val_ds) == 0:
        raise EmptySplit(f"no validation records for {spec}")
    meta = {"scenario": str(spec), "label_set": dataset.label_set.fingerprint(),
            "n_train": len(train_ds), "n_val": len(val_ds)}
    return fit_arrays(model_cfg, cfg, train_ds.X, train_ds.Y, val_ds.X, val_ds.Y,
                      log_path=log_path, metadata=meta, dtype=dtype)

