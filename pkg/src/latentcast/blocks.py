"""Neural building blocks shared by the encoder, predictors and decoder."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .errors import ConfigError, ShapeError


NORM_EPS = 1e-5


def default_groups(channels: int) -> int:
    g = min(8, channels)
    return g if channels % g == 0 else 1


@dataclass(frozen=True)
class VitSpec:
    patch_size: tuple = (4, 4)
    embed_dim: int = 768
    depth: int = 8
    heads: int = 12
    mlp_ratio: int = 4

    def __post_init__(self):
        object.__setattr__(self, "patch_size", tuple(self.patch_size))
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.depth < 1 or self.mlp_ratio < 1:
            raise ConfigError("ViT depth and mlp_ratio must be positive")


PAPER_VIT = VitSpec()


def init_weights(module: nn.Module):
    """Variance-scaling weights, zero biases, unit/zero norm affine."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Conv3d)):
            nn.init.kaiming_normal_(m.weight, nonlinearity="linear")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Linear):
            nn.init.xavier_uniform_(m.weight)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.GroupNorm, nn.LayerNorm)):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


class LonPeriodicConv2d(nn.Conv2d):
    """Same-size convolution, wrapping in longitude and zero-padding in latitude."""

    def __init__(self, cin, cout, kernel):
        super().__init__(cin, cout, kernel, padding=0)
        self.halo = kernel // 2

    def forward(self, x):
        p = self.halo
        x = F.pad(x, (p, p, 0, 0), mode="circular")
        x = F.pad(x, (0, 0, p, p))
        return super().forward(x)


class ConvModule(nn.Sequential):
    """conv (same size) -> GroupNorm -> SiLU"""

    def __init__(self, cin, cout, kernel, groups, eps=NORM_EPS):
        super().__init__(
            LonPeriodicConv2d(cin, cout, kernel),
            nn.GroupNorm(groups, cout, eps=eps),
            nn.SiLU(),
        )


class MSRBlock(nn.Module):
    """Multi-scale residual block.

    Parallel 3x3 and 5x5 conv modules, concatenated and fused by a 1x1
    convolution, plus a residual path (identity, or 1x1 projection when the
    channel count changes).
    """

    kernel_sizes = (3, 5)

    def __init__(self, in_channels: int, out_channels: int, norm_groups: int | None = None,
                 norm_eps: float = NORM_EPS):
        super().__init__()
        groups = default_groups(out_channels) if norm_groups is None else norm_groups
        if groups < 1 or out_channels % groups:
            raise ConfigError(f"out_channels {out_channels} not divisible by norm_groups {groups}")
        self.in_channels, self.out_channels = in_channels, out_channels
        self.branches = nn.ModuleList(
            ConvModule(in_channels, out_channels, k, groups, norm_eps) for k in self.kernel_sizes
        )
        self.fuse = nn.Conv2d(len(self.kernel_sizes) * out_channels, out_channels, 1)
        self.skip = nn.Identity() if in_channels == out_channels else nn.Conv2d(in_channels, out_channels, 1)

    def forward(self, x):
        if x.shape[-1] < 5 or x.shape[-2] < 5:
            raise ShapeError(f"MSR block needs spatial dims >= 5, got {tuple(x.shape[-2:])}")
        y = torch.cat([b(x) for b in self.branches], dim=1)
        return self.fuse(y) + self.skip(x)


def msr_stack(channels, norm_eps: float = NORM_EPS) -> nn.Sequential:
    """Chain of MSR blocks through the given channel schedule."""
    return nn.Sequential(*(MSRBlock(a, b, norm_eps=norm_eps) for a, b in zip(channels[:-1], channels[1:])))


class TemporalConv3d(nn.Module):
    """Two (2,3,3) 3-D convolutions with SiLU between, mixing two time steps.

    Input/output ``[B, 2, d, H, W]``. Time is padded by replicating the last
    step so each convolution keeps two output steps.
    """

    def __init__(self, channels: int, residual: bool = True):
        super().__init__()
        self.conv1 = nn.Conv3d(channels, channels, (2, 3, 3), padding=(0, 1, 1))
        self.conv2 = nn.Conv3d(channels, channels, (2, 3, 3), padding=(0, 1, 1))
        self.residual = residual

    @staticmethod
    def _pad_time(x):
        return torch.cat([x, x[:, :, -1:]], dim=2)

    def forward(self, x):
        if x.ndim != 5 or x.shape[1] != 2:
            raise ShapeError(f"temporal conv expects [B, 2, d, H, W], got {tuple(x.shape)}")
        y = x.transpose(1, 2)
        y = self.conv1(self._pad_time(y))
        y = self.conv2(self._pad_time(F.silu(y)))
        y = y.transpose(1, 2)
        return x + y if self.residual else y


class PatchEmbed(nn.Module):
    """Strided-conv patch projection plus a learned per-position embedding."""

    def __init__(self, in_channels: int, spec: VitSpec, grid: tuple):
        super().__init__()
        ph, pw = spec.patch_size
        H, W = grid
        if H % ph or W % pw:
            raise ShapeError(f"grid {H}x{W} not divisible by patch size {spec.patch_size}")
        self.grid = (H // ph, W // pw)
        self.proj = nn.Conv2d(in_channels, spec.embed_dim, spec.patch_size, stride=spec.patch_size)
        self.pos = nn.Parameter(torch.zeros(1, spec.embed_dim, *self.grid))
        nn.init.trunc_normal_(self.pos, std=0.02)

    def forward(self, x):
        ph, pw = self.proj.stride
        if x.shape[-2] % ph or x.shape[-1] % pw:
            raise ShapeError(f"input {tuple(x.shape[-2:])} not divisible by patch size {(ph, pw)}")
        y = self.proj(x)
        if y.shape[-2:] != self.pos.shape[-2:]:
            raise ShapeError(f"token grid {tuple(y.shape[-2:])} does not match position table {self.grid}")
        return y + self.pos


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, return_weights: bool = False):
        B, N, D = x.shape
        q, k, v = self.qkv(x).reshape(B, N, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
        attn = (q @ k.transpose(-2, -1) * self.scale).softmax(dim=-1)
        y = (attn @ v).transpose(1, 2).reshape(B, N, D)
        y = self.proj(y)
        return (y, attn) if return_weights else y


class ViTBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim)
        )

    def forward(self, tokens):
        """tokens: [B, N, D]"""
        tokens = tokens + self.attn(self.norm1(tokens))
        return tokens + self.mlp(self.norm2(tokens))


class PatchRecovery(nn.Module):
    """LayerNorm -> linear to out_channels*ph*pw per token -> reshape to the grid."""

    def __init__(self, spec: VitSpec, out_channels: int):
        super().__init__()
        self.patch = spec.patch_size
        self.out_channels = out_channels
        self.norm = nn.LayerNorm(spec.embed_dim)
        self.fc = nn.Linear(spec.embed_dim, out_channels * self.patch[0] * self.patch[1])

    def forward(self, tokens):
        """tokens: [B, D, h', w'] -> [B, out_channels, h'*ph, w'*pw]"""
        B, D, h, w = tokens.shape
        if D != self.norm.normalized_shape[0]:
            raise ShapeError(f"token dim {D} != embed_dim {self.norm.normalized_shape[0]}")
        ph, pw = self.patch
        y = self.fc(self.norm(tokens.permute(0, 2, 3, 1)))
        y = y.reshape(B, h, w, self.out_channels, ph, pw)
        return y.permute(0, 3, 1, 4, 2, 5).reshape(B, self.out_channels, h * ph, w * pw)


class ViT(nn.Module):
    """patchify -> ViT blocks -> patch recovery, on a [B, C, H, W] field."""

    def __init__(self, channels: int, spec: VitSpec, grid: tuple):
        super().__init__()
        self.spec = spec
        self.embed = PatchEmbed(channels, spec, grid)
        self.blocks = nn.ModuleList(ViTBlock(spec.embed_dim, spec.heads, spec.mlp_ratio) for _ in range(spec.depth))
        self.recover = PatchRecovery(spec, channels)

    def forward(self, x):
        t = self.embed(x)
        B, D, h, w = t.shape
        seq = t.flatten(2).transpose(1, 2)
        for blk in self.blocks:
            seq = blk(seq)
        return self.recover(seq.transpose(1, 2).reshape(B, D, h, w))


def param_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())

