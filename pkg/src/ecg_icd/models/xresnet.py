"""XResNet1d: bottleneck residual CNN for multi-lead time series."""
from __future__ import annotations

import torch
from torch import nn


def conv_bn(ni, nf, ks, stride=1, act=True, zero_bn=False):
    bn = nn.BatchNorm1d(nf)
    nn.init.constant_(bn.weight, 0.0 if zero_bn else 1.0)
    layers = [nn.Conv1d(ni, nf, ks, stride=stride, padding=ks // 2, bias=False), bn]
    if act:
        layers.append(nn.ReLU())
    return nn.Sequential(*layers)


class Bottleneck(nn.Module):
    """1x1 -> k x k (strided) -> 1x1 with an average-pooled identity path."""

    def __init__(self, ni, nh, expansion, stride, ks):
        super().__init__()
        nf = nh * expansion
        self.convs = nn.Sequential(
            conv_bn(ni, nh, 1),
            conv_bn(nh, nh, ks, stride=stride),
            conv_bn(nh, nf, 1, act=False, zero_bn=True),
        )
        idpath = []
        if stride != 1:
            idpath.append(nn.AvgPool1d(2, ceil_mode=True))
        if ni != nf:
            idpath.append(conv_bn(ni, nf, 1, act=False))
        self.idpath = nn.Sequential(*idpath)
        self.act = nn.ReLU()

    def forward(self, x):
        return self.act(self.convs(x) + self.idpath(x))


def global_avg_pool(h: torch.Tensor) -> torch.Tensor:
    """Mean over the time axis of (batch, channels, T) features.

    Appending m all-zero time steps scales the result by T / (T + m).
    """
    return h.mean(dim=-1)


class XResNet1d(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            w = cfg.base_width
            stem_sizes = [cfg.in_leads, max(w // 2, 1), max(w // 2, 1), w]
            self.stem = nn.Sequential(
                *[conv_bn(stem_sizes[i], stem_sizes[i + 1], cfg.stem_kernel, stride=2 if i == 0 else 1)
                  for i in range(3)],
                nn.MaxPool1d(3, stride=2, padding=1),
            )
            stages = []
            ni = w
            for i, depth in enumerate(cfg.stage_depths):
                nh = w * 2 ** i
                blocks = []
                for j in range(depth):
                    stride = 2 if (i > 0 and j == 0) else 1
                    blocks.append(Bottleneck(ni, nh, cfg.expansion, stride, cfg.block_kernel))
                    ni = nh * cfg.expansion
                stages.append(nn.Sequential(*blocks))
            self.stages = nn.Sequential(*stages)
            self.dropout = nn.Dropout(cfg.dropout)
            self.head = nn.Linear(ni, cfg.n_labels)

    def feature_maps(self, x: torch.Tensor) -> torch.Tensor:
        return self.stages(self.stem(x))

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return global_avg_pool(self.feature_maps(x))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.dropout(self.features(x)))
