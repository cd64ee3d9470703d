"""Classifier families, BCE loss and reverse-mode gradients."""
from __future__ import annotations

from collections import OrderedDict
from typing import Iterable, Mapping

import torch
import torch.nn.functional as F

from ..exceptions import NonFiniteGradient, ShapeMismatch
from .config import FAMILIES, PRESETS, S4, XRESNET1D, ModelConfig, preset
from .s4 import S4Classifier, causal_conv, discretize, s4_kernel
from .xresnet import XResNet1d, global_avg_pool

__all__ = [
    "FAMILIES", "PRESETS", "S4", "XRESNET1D", "ModelConfig", "preset", "S4Classifier",
    "XResNet1d", "build_model", "get_parameters", "set_parameters", "forward", "loss",
    "gradient", "s4_kernel", "discretize", "causal_conv", "global_avg_pool",
]


def build_model(cfg: ModelConfig, dtype=torch.float32) -> torch.nn.Module:
    cls = S4Classifier if cfg.family == S4 else XResNet1d
    return cls(cfg).to(dtype)


def get_parameters(model: torch.nn.Module) -> "OrderedDict[str, torch.Tensor]":
    """Named parameters followed by buffers (normalization statistics)."""
    return OrderedDict((k, v.detach().clone()) for k, v in model.state_dict().items())


def set_parameters(model: torch.nn.Module, params: Mapping[str, torch.Tensor]) -> torch.nn.Module:
    model.load_state_dict({k: torch.as_tensor(v) for k, v in params.items()}, strict=True)
    return model


def _check_batch(cfg: ModelConfig, batch: torch.Tensor):
    if batch.ndim != 3 or batch.shape[1] != cfg.in_leads:
        raise ShapeMismatch(f"expected (batch, {cfg.in_leads}, time), got {tuple(batch.shape)}")


def forward(cfg: ModelConfig, params, batch, model: torch.nn.Module | None = None) -> torch.Tensor:
    """Inference-mode logits (dropout off, normalization on running statistics)."""
    if model is None:
        dtype = next(iter(params.values())).dtype if params else torch.float32
        model = set_parameters(build_model(cfg, dtype), params)
    batch = torch.as_tensor(batch, dtype=next(model.parameters()).dtype)
    _check_batch(cfg, batch)
    model.eval()
    with torch.no_grad():
        return model(batch)


def loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy on logits, ``y softplus(-z) + (1-y) softplus(z)``."""
    if logits.shape != targets.shape:
        raise ShapeMismatch(f"logits {tuple(logits.shape)} vs targets {tuple(targets.shape)}")
    z = logits
    y = targets.to(z.dtype)
    # smooth at z = 0 and free of cancellation for large |z|
    return (y * F.softplus(-z) + (1 - y) * F.softplus(z)).mean()


def gradient(cfg: ModelConfig, params, batch, targets, model: torch.nn.Module | None = None,
             train_mode: bool = True, frozen: Iterable[str] = ()) -> "OrderedDict[str, torch.Tensor]":
    """Exact reverse-mode gradient of :func:`loss` w.r.t. every named parameter.

    Parameters listed in ``frozen`` (exact names or ``prefix.``) and
    parameters without a data path come back as exact zeros.
    """
    if model is None:
        dtype = next(iter(params.values())).dtype
        model = set_parameters(build_model(cfg, dtype), params)
    dtype = next(model.parameters()).dtype
    batch = torch.as_tensor(batch, dtype=dtype)
    targets = torch.as_tensor(targets, dtype=dtype)
    _check_batch(cfg, batch)
    frozen = tuple(frozen)
    named = list(model.named_parameters())
    live = [(n, p) for n, p in named if not _is_frozen(n, frozen)]
    model.train(train_mode)
    value = loss(model(batch), targets)
    grads = torch.autograd.grad(value, [p for _, p in live], allow_unused=True)
    by_name = {n: g for (n, _), g in zip(live, grads)}
    out = OrderedDict()
    for n, p in named:
        g = by_name.get(n)
        out[n] = torch.zeros_like(p) if g is None else g.detach()
        if not torch.isfinite(out[n]).all():
            raise NonFiniteGradient(f"non-finite gradient in {n}")
    return out


def _is_frozen(name: str, frozen: tuple) -> bool:
    return any(name == f or name.startswith(f.rstrip(".") + ".") for f in frozen)
