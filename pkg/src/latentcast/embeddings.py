"""Multi-cycle time embedding and constant-field embedding."""
from __future__ import annotations

from datetime import datetime

import numpy as np
import torch
from torch import nn

from .blocks import NORM_EPS, MSRBlock
from .dataset import hours_since_epoch
from .errors import DataError, ShapeError

DEFAULT_CYCLES = tuple(range(1, 16))
EMBED_CHANNELS = 12


def raw_time_features(t, cycles_days=DEFAULT_CYCLES) -> np.ndarray:
    """(sin, cos) of the phase within each k-day cycle, interleaved per cycle.

    ``t`` is a datetime/ISO string or hours since 2000-01-01T00Z (scalar or array).
    Returns ``[..., 2 * len(cycles_days)]`` float64.
    """
    if isinstance(t, (datetime, str)):
        t = hours_since_epoch(t)
    h = np.asarray(t, dtype=np.float64)[..., None]
    period = 24.0 * np.asarray(cycles_days, dtype=np.float64)
    phase = 2.0 * np.pi * h / period
    out = np.stack([np.sin(phase), np.cos(phase)], axis=-1)
    return out.reshape(out.shape[:-2] + (2 * len(cycles_days),))


def time_features(hours: torch.Tensor, cycles_days=DEFAULT_CYCLES) -> torch.Tensor:
    """Torch counterpart of :func:`raw_time_features`; phase computed in float64."""
    h = hours.to(torch.float64)[..., None]
    period = 24.0 * torch.as_tensor(cycles_days, dtype=torch.float64)
    phase = 2.0 * torch.pi * h / period
    out = torch.stack([torch.sin(phase), torch.cos(phase)], dim=-1)
    return out.reshape(out.shape[:-2] + (2 * len(cycles_days),))


class TimeEmbedding(nn.Module):
    """Two raw time vectors -> FCN-128 -> FCN-128 -> 12, broadcast over the grid."""

    def __init__(self, n_cycles: int = len(DEFAULT_CYCLES), hidden: int = 128,
                 out_channels: int = EMBED_CHANNELS, slope: float = 0.01):
        super().__init__()
        self.raw_dim = 2 * n_cycles
        self.net = nn.Sequential(
            nn.Linear(2 * self.raw_dim, hidden),
            nn.LeakyReLU(slope),
            nn.Linear(hidden, hidden),
            nn.LeakyReLU(slope),
            nn.Linear(hidden, out_channels),
        )

    def forward(self, raw_prev, raw_curr, grid):
        if raw_prev.shape != raw_curr.shape:
            raise ShapeError(f"time vectors differ in shape: {tuple(raw_prev.shape)} vs {tuple(raw_curr.shape)}")
        if raw_prev.shape[-1] != self.raw_dim:
            raise ShapeError(f"expected raw time vectors of length {self.raw_dim}, got {raw_prev.shape[-1]}")
        dtype = self.net[0].weight.dtype
        e = self.net(torch.cat([raw_prev, raw_curr], dim=-1).to(dtype))
        H, W = grid
        return e[..., None, None].expand(*e.shape, H, W)


class ConstantEmbedding(nn.Module):
    """Two MSR blocks mapping the constant fields to 12 channels."""

    def __init__(self, in_channels: int, out_channels: int = EMBED_CHANNELS, norm_eps: float = NORM_EPS):
        super().__init__()
        self.blocks = nn.Sequential(MSRBlock(in_channels, out_channels, norm_eps=norm_eps),
                                    MSRBlock(out_channels, out_channels, norm_eps=norm_eps))

    def forward(self, constants):
        if not torch.isfinite(constants).all():
            raise DataError("constant fields contain non-finite values")
        squeeze = constants.ndim == 3
        y = self.blocks(constants[None] if squeeze else constants)
        return y[0] if squeeze else y
