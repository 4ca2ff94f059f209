"""Small convolutional noise predictor with timestep and prompt conditioning."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn


@dataclass
class ToyDenoiserConfig:
    in_channels: int = 3
    base_channels: int = 32
    embed_dim: int = 64        # encoded-prompt token dimension
    ctx_dim: int = 128
    pool_queries: int = 2
    time_dim: int = 64


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(
        torch.arange(half, dtype=torch.float64) * -(math.log(10000.0) / (half - 1))
    ).to(t.dtype)
    ang = t[:, None].to(freqs.dtype) * freqs[None, :]
    return torch.cat([ang.sin(), ang.cos()], dim=-1)


class AttentionPool(nn.Module):
    """Learned-query cross-attention pooling of the encoded prompt."""

    def __init__(self, d: int, n_queries: int):
        super().__init__()
        self.query = nn.Parameter(torch.randn(n_queries, d) * 0.2)
        self.key = nn.Linear(d, d)
        self.value = nn.Linear(d, d)
        self.scale = d ** -0.5

    def forward(self, cond: torch.Tensor) -> torch.Tensor:
        # cond: [B, s, d] -> [B, n_queries * d]
        k = self.key(cond)
        v = self.value(cond)
        attn = torch.softmax(self.query @ k.transpose(1, 2) * self.scale, dim=-1)
        pooled = attn @ v                       # [B, n_queries, d]
        return pooled.flatten(start_dim=1)


class SpatialPromptPool(nn.Module):
    """Per-position attention pooling of the encoded prompt.

    Each spatial location forms its own query and pools the prompt tokens,
    so different image regions can read different tokens instead of sharing
    one globally pooled conditioning vector.
    """

    def __init__(self, channels: int, d: int):
        super().__init__()
        groups = 8 if channels % 8 == 0 else 1
        self.norm = nn.GroupNorm(groups, channels)
        self.query = nn.Conv2d(channels, d, 1)
        self.key = nn.Linear(d, d)
        self.value = nn.Linear(d, d)
        self.out = nn.Conv2d(d, channels, 1)
        self.scale = d ** -0.5

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        # x: [B, C, H, W], cond: [B, s, d]
        B, _, H, W = x.shape
        q = self.query(self.norm(x)).flatten(2).transpose(1, 2)   # [B, HW, d]
        k = self.key(cond)
        v = self.value(cond)
        attn = torch.softmax(q @ k.transpose(1, 2) * self.scale, dim=-1)
        pooled = (attn @ v).transpose(1, 2).reshape(B, -1, H, W)  # [B, d, H, W]
        return x + self.out(pooled)


class FiLMResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, ctx_dim: int):
        super().__init__()
        groups = 8 if cout % 8 == 0 else 1
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm1 = nn.GroupNorm(groups, cout)
        self.film = nn.Linear(ctx_dim, 2 * cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, ctx):
        h = self.norm1(self.conv1(x))
        scale, shift = self.film(ctx)[:, :, None, None].chunk(2, dim=1)
        h = torch.nn.functional.silu(h * (1 + scale) + shift)
        h = self.norm2(self.conv2(h))
        return torch.nn.functional.silu(h + self.skip(x))


class ToyDenoiser(nn.Module):
    """U-shaped conv net predicting the noise in a 32x32 latent."""

    def __init__(self, config: ToyDenoiserConfig | None = None):
        super().__init__()
        cfg = config or ToyDenoiserConfig()
        self.config = cfg
        c = cfg.base_channels
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.time_dim, cfg.ctx_dim), nn.SiLU(),
            nn.Linear(cfg.ctx_dim, cfg.ctx_dim),
        )
        self.pool = AttentionPool(cfg.embed_dim, cfg.pool_queries)
        self.cond_proj = nn.Linear(cfg.embed_dim * cfg.pool_queries, cfg.ctx_dim)
        self.ctx_mlp = nn.Sequential(nn.SiLU(), nn.Linear(cfg.ctx_dim, cfg.ctx_dim))

        self.stem = nn.Conv2d(cfg.in_channels, c, 3, padding=1)
        self.enc1 = FiLMResBlock(c, c, cfg.ctx_dim)
        self.down1 = nn.Conv2d(c, 2 * c, 3, stride=2, padding=1)
        self.enc2 = FiLMResBlock(2 * c, 2 * c, cfg.ctx_dim)
        self.down2 = nn.Conv2d(2 * c, 2 * c, 3, stride=2, padding=1)
        self.mid = FiLMResBlock(2 * c, 2 * c, cfg.ctx_dim)
        self.mid_pool = SpatialPromptPool(2 * c, cfg.embed_dim)
        self.up1 = nn.ConvTranspose2d(2 * c, 2 * c, 4, stride=2, padding=1)
        self.dec2 = FiLMResBlock(4 * c, 2 * c, cfg.ctx_dim)
        self.dec2_pool = SpatialPromptPool(2 * c, cfg.embed_dim)
        self.up2 = nn.ConvTranspose2d(2 * c, c, 4, stride=2, padding=1)
        self.dec1 = FiLMResBlock(2 * c, c, cfg.ctx_dim)
        self.out = nn.Conv2d(c, cfg.in_channels, 3, padding=1)

    def predict(self, noisy: torch.Tensor, condition: torch.Tensor, t) -> torch.Tensor:
        squeeze = noisy.ndim == 3
        if squeeze:
            noisy = noisy.unsqueeze(0)
        if condition.ndim == 2:
            condition = condition.unsqueeze(0)
        B = noisy.shape[0]
        if condition.shape[0] == 1 and B > 1:
            condition = condition.expand(B, -1, -1)
        if not isinstance(t, torch.Tensor):
            t = torch.full((B,), float(t))
        temb = sinusoidal_embedding(t.to(noisy.dtype), self.config.time_dim)
        ctx = self.ctx_mlp(self.time_mlp(temb) + self.cond_proj(self.pool(condition)))

        h0 = self.stem(noisy)
        h1 = self.enc1(h0, ctx)
        h2 = self.enc2(self.down1(h1), ctx)
        hm = self.mid_pool(self.mid(self.down2(h2), ctx), condition)
        u2 = self.dec2_pool(
            self.dec2(torch.cat([self.up1(hm), h2], dim=1), ctx), condition)
        u1 = self.dec1(torch.cat([self.up2(u2), h1], dim=1), ctx)
        eps = self.out(u1)
        return eps.squeeze(0) if squeeze else eps

    forward = predict


def build_toy_denoiser(config: ToyDenoiserConfig | None = None) -> ToyDenoiser:
    return ToyDenoiser(config)
