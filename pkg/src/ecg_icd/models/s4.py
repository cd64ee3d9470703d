"""Bidirectional diagonal state-space (S4D-style) classifier.

The normative layer equations live in docs/model-equations.md.
"""
from __future__ import annotations

import math
import warnings

import torch
import torch.nn.functional as F
from torch import nn

from ..exceptions import UnstablePoleWarning


def discretize(lam: torch.Tensor, B: torch.Tensor, dt: torch.Tensor):
    """Zero-order hold: Abar = exp(dt*lam), Bbar = (Abar - 1) / lam * B."""
    dtA = dt.unsqueeze(-1) * lam
    Abar = torch.exp(dtA)
    Bbar = (Abar - 1.0) / lam * B
    return Abar, Bbar


def s4_kernel(lam: torch.Tensor, B: torch.Tensor, C: torch.Tensor, dt: torch.Tensor,
              L: int) -> torch.Tensor:
    """Convolution kernel ``K[h, t] = Re(sum_n C Abar^t Bbar)`` of shape (H, L).

    ``lam``, ``B``, ``C`` are complex (H, N); ``dt`` is real positive (H,).
    """
    if L < 1:
        raise ValueError("kernel length must be >= 1")
    if bool((lam.real >= 0).any()):
        warnings.warn("state matrix has poles with non-negative real part", UnstablePoleWarning,
                      stacklevel=2)
    dtA = dt.unsqueeze(-1) * lam
    _, Bbar = discretize(lam, B, dt)
    t = torch.arange(L, dtype=dt.dtype, device=dt.device)
    vander = torch.exp(dtA.unsqueeze(-1) * t)  # (H, N, L)
    return torch.einsum("hn,hnl->hl", C * Bbar, vander).real


def causal_conv(u: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """y[..., h, t] = sum_{s<=t} k[h, t-s] u[..., h, s] via zero-padded FFT."""
    L = u.shape[-1]
    n = 2 * L
    y = torch.fft.irfft(torch.fft.rfft(u, n=n) * torch.fft.rfft(k, n=n), n=n)
    return y[..., :L]


class SSMKernel(nn.Module):
    """One direction's diagonal SSM parameters for H channels with N states."""

    def __init__(self, d_model: int, d_state: int, dt_min: float, dt_max: float,
                 generator: torch.Generator):
        super().__init__()
        H, N = d_model, d_state
        log_dt = torch.rand(H, generator=generator) * (math.log(dt_max) - math.log(dt_min)) + math.log(dt_min)
        self.log_dt = nn.Parameter(log_dt)
        # lam_n = -1/2 + i*pi*n
        self.log_neg_re = nn.Parameter(torch.full((H, N), math.log(0.5)))
        self.lam_im = nn.Parameter(math.pi * torch.arange(N, dtype=torch.float32).repeat(H, 1))
        self.B_re = nn.Parameter(torch.ones(H, N))
        self.B_im = nn.Parameter(torch.zeros(H, N))
        self.C_re = nn.Parameter(torch.randn(H, N, generator=generator) * math.sqrt(0.5))
        self.C_im = nn.Parameter(torch.randn(H, N, generator=generator) * math.sqrt(0.5))
        self.D = nn.Parameter(torch.randn(H, generator=generator))

    def complex_params(self):
        lam = torch.complex(-torch.exp(self.log_neg_re), self.lam_im)
        B = torch.complex(self.B_re, self.B_im)
        C = torch.complex(self.C_re, self.C_im)
        return lam, B, C, torch.exp(self.log_dt)

    def kernel(self, L: int) -> torch.Tensor:
        lam, B, C, dt = self.complex_params()
        return s4_kernel(lam, B, C, dt, L)

    def forward(self, u: torch.Tensor) -> torch.Tensor:
        """u: (batch, H, L) -> causal SSM output plus skip term."""
        return causal_conv(u, self.kernel(u.shape[-1])) + self.D.unsqueeze(-1) * u


class S4Block(nn.Module):
    """Pre-norm residual block: u + W_out GELU([fwd(z); bwd(z)]) + b_out, z = LN(u)."""

    def __init__(self, d_model, d_state, bidirectional, dropout, dt_min, dt_max, generator):
        super().__init__()
        self.bidirectional = bidirectional
        self.norm = nn.LayerNorm(d_model)
        self.fwd = SSMKernel(d_model, d_state, dt_min, dt_max, generator)
        self.bwd = SSMKernel(d_model, d_state, dt_min, dt_max, generator) if bidirectional else None
        width = 2 * d_model if bidirectional else d_model
        self.out_proj = nn.Linear(width, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, u: torch.Tensor) -> torch.Tensor:
        # u: (batch, L, H)
        z = self.norm(u).transpose(1, 2)  # (batch, H, L)
        y = self.fwd(z)
        if self.bidirectional:
            yb = self.bwd(z.flip(-1)).flip(-1)
            y = torch.cat([y, yb], dim=1)
        y = self.out_proj(F.gelu(y).transpose(1, 2))
        return u + self.dropout(y)


class S4Classifier(nn.Module):
    """Linear encoder -> n S4 blocks -> LayerNorm -> mean over time -> linear head."""

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        g = torch.Generator().manual_seed(cfg.seed)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self.encoder = nn.Linear(cfg.in_leads, cfg.d_model)
            self.blocks = nn.ModuleList(
                S4Block(cfg.d_model, cfg.d_state, cfg.bidirectional, cfg.dropout,
                        cfg.dt_min, cfg.dt_max, g)
                for _ in range(cfg.n_layers))
            self.norm = nn.LayerNorm(cfg.d_model)
            self.head = nn.Linear(cfg.d_model, cfg.n_labels)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        h = self.encoder(x.transpose(1, 2))  # (batch, L, H)
        for block in self.blocks:
            h = block(h)
        return self.norm(h).mean(dim=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x: (batch, leads, L) -> logits (batch, n_labels)."""
        return self.head(self.features(x))
