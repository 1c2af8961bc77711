"""Encoder, latent prediction models (one per interval) and decoder."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .blocks import NORM_EPS, PAPER_VIT, TemporalConv3d, ViT, VitSpec, init_weights, msr_stack
from .embeddings import DEFAULT_CYCLES, EMBED_CHANNELS, ConstantEmbedding, TimeEmbedding, time_features
from .errors import ConfigError, DataError, ShapeError


@dataclass(frozen=True)
class ModelConfig:
    C: int
    key_indices: tuple
    grid: tuple
    d: int = 24
    encoder_widths: tuple = (64, 48, 32)
    decoder_widths: tuple = (48, 64, 64, 64)
    vit: VitSpec = field(default_factory=VitSpec)
    cycles_days: tuple = DEFAULT_CYCLES
    time_hidden: int = 128
    embed_channels: int = EMBED_CHANNELS
    const_channels: int = 2
    intervals: tuple = (1, 2, 4)
    temporal_residual: bool = True
    norm_eps: float = NORM_EPS

    def __post_init__(self):
        for name in ("key_indices", "grid", "encoder_widths", "decoder_widths", "cycles_days", "intervals"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if isinstance(self.vit, dict):
            object.__setattr__(self, "vit", VitSpec(**self.vit))
        if len(self.grid) != 2:
            raise ConfigError(f"grid must be (H, W), got {self.grid}")
        ph, pw = self.vit.patch_size
        if self.grid[0] % ph or self.grid[1] % pw:
            raise ConfigError(f"grid {self.grid} not divisible by patch size {self.vit.patch_size}")
        if any(not 0 <= k < self.C for k in self.key_indices):
            raise ConfigError(f"key indices {self.key_indices} outside [0, {self.C})")
        if self.d < 1:
            raise ConfigError("latent width d must be positive")
        if self.const_channels < 1:
            raise ConfigError("const_channels must be positive")
        if not self.norm_eps > 0:
            raise ConfigError("norm_eps must be positive")

    @property
    def c(self) -> int:
        return len(self.key_indices)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["vit"] = asdict(self.vit)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["vit"] = VitSpec(**d["vit"]) if isinstance(d.get("vit"), dict) else d.get("vit", PAPER_VIT)
        return cls(**d)


def channel_correlation(x: torch.Tensor, key_indices) -> torch.Tensor:
    """Inner products over the grid between every channel and every key channel.

    x: [B, C, H, W] -> [B, C, c]
    """
    k = x[:, list(key_indices)]
    return torch.einsum("bchw,bkhw->bck", x, k)


class ChannelAttention(nn.Module):
    """Reweights input channels by their mean absolute correlation with the key channels.

    The per-grid-cell correlation is put through a scalar gain/bias and a sigmoid,
    so every channel weight stays in (0, 1).
    """

    def __init__(self, key_indices):
        super().__init__()
        self.key_indices = tuple(key_indices)
        self.gain = nn.Parameter(torch.ones(()))
        self.bias = nn.Parameter(torch.zeros(()))

    def raw_scores(self, x):
        return channel_correlation(x, self.key_indices).abs().mean(dim=-1)

    def scores(self, x):
        H, W = x.shape[-2:]
        return torch.sigmoid(self.gain * self.raw_scores(x) / (H * W) + self.bias)

    def forward(self, x):
        return x * self.scores(x)[..., None, None]


def _per_step(module, x):
    """Apply a [B, C, H, W] module to [B, T, C, H, W] by folding time into batch."""
    if x.ndim == 4:
        return module(x)
    if x.ndim != 5:
        raise ShapeError(f"expected [B, C, H, W] or [B, T, C, H, W], got {tuple(x.shape)}")
    B, T = x.shape[:2]
    y = module(x.reshape(B * T, *x.shape[2:]))
    return y.reshape(B, T, *y.shape[1:])


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.attention = ChannelAttention(cfg.key_indices)
        self.blocks = msr_stack([cfg.C, *cfg.encoder_widths, cfg.d], cfg.norm_eps)

    def forward(self, x):
        return self.blocks(self.attention(x))


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.blocks = msr_stack([cfg.d, *cfg.decoder_widths], cfg.norm_eps)
        self.proj = nn.Conv2d(cfg.decoder_widths[-1], cfg.c, 1)

    def forward(self, h):
        return self.proj(self.blocks(h))


class LatentPredictor(nn.Module):
    """One LPM: MSR x4 -> 3-D temporal conv -> ViT -> MSR x4."""

    def __init__(self, cfg: ModelConfig, interval: int):
        super().__init__()
        d = cfg.d
        self.d = d
        self.interval = interval
        self.pre = msr_stack([2 * d + 2 * cfg.embed_channels, 2 * d, 2 * d, 2 * d, 2 * d], cfg.norm_eps)
        self.temporal = TemporalConv3d(d, residual=cfg.temporal_residual)
        self.vit = ViT(2 * d, cfg.vit, cfg.grid)
        self.post = msr_stack([2 * d, 2 * d, 2 * d, d, d], cfg.norm_eps)

    def forward(self, h_prev, h_curr, t_emb, c_emb):
        z = torch.cat([h_prev, h_curr, t_emb, c_emb], dim=1)
        z = self.pre(z)
        B, _, H, W = z.shape
        z = self.temporal(z.reshape(B, 2, self.d, H, W)).reshape(B, 2 * self.d, H, W)
        z = self.vit(z)
        return self.post(z)


class Forecaster(nn.Module):
    """Shared encoder/decoder, one latent predictor per interval, and the embeddings."""

    def __init__(self, cfg: ModelConfig, constants=None):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        self.lpms = nn.ModuleDict({str(s): LatentPredictor(cfg, s) for s in cfg.intervals})
        self.time_embed = TimeEmbedding(len(cfg.cycles_days), cfg.time_hidden, cfg.embed_channels)
        self.const_embed = ConstantEmbedding(cfg.const_channels, cfg.embed_channels, cfg.norm_eps)
        if constants is None:
            constants = np.zeros((cfg.const_channels, *cfg.grid), dtype=np.float32)
        constants = torch.as_tensor(np.asarray(constants), dtype=torch.float32)
        if constants.shape != (cfg.const_channels, *cfg.grid):
            raise ShapeError(f"constants shape {tuple(constants.shape)} != {(cfg.const_channels, *cfg.grid)}")
        self.register_buffer("constants", constants)
        self.reset_parameters()

    def reset_parameters(self):
        init_weights(self)
        nn.init.zeros_(self.decoder.proj.weight)
        nn.init.zeros_(self.decoder.proj.bias)
        for lpm in self.lpms.values():
            nn.init.trunc_normal_(lpm.vit.embed.pos, std=0.02)
        with torch.no_grad():
            self.encoder.attention.gain.fill_(1.0)
            self.encoder.attention.bias.zero_()

    @property
    def intervals(self):
        return tuple(int(k) for k in self.lpms.keys())

    def encode(self, x):
        """[B, (T,) C, H, W] -> [B, (T,) d, H, W]; steps are encoded independently."""
        if not torch.isfinite(x).all():
            raise DataError("encoder input contains non-finite values")
        return _per_step(self.encoder, x)

    def decode(self, h):
        """[B, (T,) d, H, W] -> [B, (T,) c, H, W]"""
        return _per_step(self.decoder, h)

    def raw_time(self, hours, batch: int | None = None):
        h = torch.as_tensor(hours, dtype=torch.float64).reshape(-1)
        if batch is not None:
            h = h.expand(batch)
        return time_features(h, self.cfg.cycles_days)

    def lpm_step(self, h_prev, h_curr, hours_prev, hours_curr, interval: int):
        """Predict the latent one ``interval`` after ``h_curr``.

        ``hours_*`` are hours since 2000-01-01T00Z of the two input steps, shape [B].
        """
        key = str(int(interval))
        if key not in self.lpms:
            raise ConfigError(f"no latent predictor for interval {interval}; have {self.intervals}")
        if not (torch.isfinite(h_prev).all() and torch.isfinite(h_curr).all()):
            raise DataError("latent input contains non-finite values")
        B = h_curr.shape[0]
        grid = tuple(h_curr.shape[-2:])
        t_emb = self.time_embed(self.raw_time(hours_prev, B), self.raw_time(hours_curr, B), grid)
        c_emb = self.const_embed(self.constants).expand(B, -1, -1, -1)
        return self.lpms[key](h_prev, h_curr, t_emb.to(h_curr.dtype), c_emb.to(h_curr.dtype))
