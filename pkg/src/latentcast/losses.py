"""Latitude/variable-weighted L1 losses on key variables, reconstructions and latents.

All tensors are ``[B, T, ch, H, W]``. Grid sums are divided by ``H*W`` so the
unit-mean latitude weights act as a weighting, sums run over lead time and
variables, and the result is averaged over the batch. The latent loss
averages over latent channels, whose count and scale are arbitrary.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch

from .dataset import VariableCatalog
from .errors import ShapeError

SURFACE_WEIGHT = 0.1
FULL_WEIGHT_SURFACE = ("t2m", "2m_temperature")


def variable_weights(catalog: VariableCatalog, full_weight=FULL_WEIGHT_SURFACE) -> np.ndarray:
    """0.1 for single-level key variables (2 m temperature excepted), 1 for upper air."""
    w = []
    for i in catalog.key_indices:
        name = catalog.names[i].lower()
        single_level = catalog.surface_flags[i] or catalog.levels[i] in ("surface", "integrated")
        w.append(SURFACE_WEIGHT if single_level and name not in full_weight else 1.0)
    return np.asarray(w)


def inverse_variance(key_data: np.ndarray) -> np.ndarray:
    """Per-variable 1/var over [T, c, H, W] training data."""
    var = key_data.astype(np.float64).var(axis=(0, 2, 3))
    return 1.0 / var


@dataclass
class LossWeights:
    q: torch.Tensor
    w: torch.Tensor
    a: torch.Tensor

    def __post_init__(self):
        self.q = torch.as_tensor(self.q)
        self.w = torch.as_tensor(self.w)
        self.a = torch.as_tensor(self.a)
        if not (self.q > 0).all():
            raise ValueError("inverse-variance weights must be positive")

    def to(self, dtype):
        return LossWeights(self.q.to(dtype), self.w.to(dtype), self.a.to(dtype))


def _check(pred, target):
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    if pred.ndim != 5:
        raise ShapeError(f"losses expect [B, T, ch, H, W], got {tuple(pred.shape)}")


def _weighted_l1(err, cell_weight, channel_mean: bool = False):
    B, _, ch, H, W = err.shape
    norm = H * W * B * (ch if channel_mean else 1)
    return (err * cell_weight).sum() / norm


def key_loss(pred, target, weights: LossWeights):
    _check(pred, target)
    q, w, a = (t.to(pred.dtype) for t in (weights.q, weights.w, weights.a))
    cell = (q * w)[:, None, None] * a[:, None]
    return _weighted_l1((pred - target).abs(), cell)


def recon_loss(pred, target, a):
    _check(pred, target)
    a = torch.as_tensor(a).to(pred.dtype)
    return _weighted_l1((pred - target).abs(), a[:, None])


def latent_loss(pred, target, a, lead_weights=None):
    _check(pred, target)
    a = torch.as_tensor(a).to(pred.dtype)
    cell = a[:, None]
    if lead_weights is not None:
        lw = torch.as_tensor(lead_weights).to(pred.dtype)
        if lw.shape != (pred.shape[1],):
            raise ShapeError(f"lead weights {tuple(lw.shape)} do not match {pred.shape[1]} lead steps")
        cell = lw[:, None, None, None] * cell
    return _weighted_l1((pred - target).abs(), cell, channel_mean=True)


class LossParts(NamedTuple):
    key: torch.Tensor
    recon: torch.Tensor
    latent: torch.Tensor


def total_loss(parts) -> torch.Tensor:
    """Unit-weight sum of the three terms."""
    parts = LossParts(*parts)
    for name, v in parts._asdict().items():
        v = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        if not math.isfinite(v):
            raise FloatingPointError(f"{name} loss is not finite ({v})")
    return parts.key + parts.recon + parts.latent
