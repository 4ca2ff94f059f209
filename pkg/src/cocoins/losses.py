"""Masked distances, the reciprocal triplet loss, background preservation, and weights."""

from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass
class LossConfig:
    lambda_con: float = 1.0
    lambda_back: float = 1.0
    gamma: float = 1.0            # final negative-term weight
    beta: float = 2.0             # ramp exponent
    total_steps: int = 1000
    epsilon_div: float = 1e-6
    loss_mode: str = "contrastive"      # contrastive | noise_pred
    use_mask: bool = True
    use_background: bool = True
    neg_form: str = "reciprocal"        # reciprocal | subtract | none
    neg_schedule: str = "power"         # power | constant
    same_prompts: bool = False          # triplet ablation: positive reuses the anchor caption
    same_noise: bool = False            # triplet ablation: positive reuses the anchor noise

    def __post_init__(self):
        if self.epsilon_div <= 0:
            raise ValueError("epsilon_div must be > 0")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if self.loss_mode not in ("contrastive", "noise_pred"):
            raise ValueError(f"unknown loss_mode {self.loss_mode!r}")
        if self.neg_form not in ("reciprocal", "subtract", "none"):
            raise ValueError(f"unknown neg_form {self.neg_form!r}")
        if self.neg_schedule not in ("power", "constant"):
            raise ValueError(f"unknown neg_schedule {self.neg_schedule!r}")


def distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean squared error over all elements."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return torch.mean((a - b) ** 2)


def _broadcast_mask(m: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """Expand an [H,W] or [B,H,W] boolean mask over the channel dim of `like`."""
    if m.dtype != torch.bool:
        raise ValueError("mask must be boolean")
    if like.ndim == 3:          # [C,H,W]
        if m.shape != like.shape[-2:]:
            raise ValueError("mask resolution mismatch")
        return m.unsqueeze(0).expand_as(like)
    if like.ndim == 4:          # [B,C,H,W]
        if m.ndim == 2:
            m = m.unsqueeze(0).expand(like.shape[0], *m.shape)
        if m.shape != (like.shape[0], *like.shape[-2:]):
            raise ValueError("mask resolution mismatch")
        return m.unsqueeze(1).expand_as(like)
    raise ValueError("expected [C,H,W] or [B,C,H,W] images")


def masked_sq_dist(a: torch.Tensor, b: torch.Tensor, m: torch.Tensor):
    """Per-item mean squared difference over masked elements.

    Returns (dist, count) where dist is [B] (or scalar for unbatched input)
    and count is the number of masked elements per item. Empty mask -> 0.
    """
    if a.shape != b.shape:
        raise ValueError("shape mismatch")
    mb = _broadcast_mask(m, a)
    sq = (a - b) ** 2 * mb.to(a.dtype)
    if a.ndim == 3:
        count = mb.sum()
        d = sq.sum() / count.clamp(min=1)
        return torch.where(count > 0, d, torch.zeros_like(d)), count
    count = mb.sum(dim=(1, 2, 3))
    d = sq.sum(dim=(1, 2, 3)) / count.clamp(min=1)
    return torch.where(count > 0, d, torch.zeros_like(d)), count


def masked_distance(a: torch.Tensor, b: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    """Mean of (a-b)^2 over masked elements; 0 for an empty mask; batch-averaged."""
    d, _ = masked_sq_dist(a, b, m)
    return d.mean() if d.ndim else d


def downsample_mask(m: torch.Tensor, latent_hw: tuple[int, int]) -> torch.Tensor:
    """Area-pool a pixel mask to latent resolution, thresholding at 0.5."""
    if m.dtype != torch.bool or m.ndim != 2:
        raise ValueError("expected a 2-D boolean pixel mask")
    H, W = m.shape
    h, w = latent_hw
    if H % h or W % w:
        raise ValueError(f"non-integer downsampling factor from {(H, W)} to {(h, w)}")
    fh, fw = H // h, W // w
    pooled = m.float().reshape(h, fh, w, fw).mean(dim=(1, 3))
    return pooled >= 0.5


def neg_weight(k: int, cfg: LossConfig) -> float:
    """lambda_neg at step k: gamma * (k/K)^beta, or constant gamma."""
    if not 0 <= k <= cfg.total_steps:
        raise ValueError(f"step k={k} outside [0, {cfg.total_steps}]")
    if cfg.neg_schedule == "constant":
        return cfg.gamma
    return cfg.gamma * (k / cfg.total_steps) ** cfg.beta


def combine_contrastive(pos: torch.Tensor, neg_raw: torch.Tensor, neg_count: torch.Tensor,
                        lambda_neg: float, cfg: LossConfig) -> torch.Tensor:
    """Combine per-item positive and anchor-negative masked distances into Eq.-style loss.

    The reciprocal negative term is skipped for items with an empty mask.
    """
    if cfg.neg_form == "none" or lambda_neg == 0.0:
        total = pos
    elif cfg.neg_form == "reciprocal":
        recip = lambda_neg / (neg_raw + cfg.epsilon_div)
        total = pos + torch.where(neg_count > 0, recip, torch.zeros_like(recip))
    else:  # subtract: the conventional triplet form
        total = pos - lambda_neg * neg_raw
    return total.mean() if total.ndim else total


def contrastive_loss(x_a: torch.Tensor, x_p: torch.Tensor, x_n: torch.Tensor,
                     m: torch.Tensor, lambda_neg: float, cfg: LossConfig) -> torch.Tensor:
    """Pull anchor/positive together, push anchor/negative apart, inside the mask."""
    if not cfg.use_mask:
        m = torch.ones(x_a.shape[-2:], dtype=torch.bool)
    pos, _ = masked_sq_dist(x_a, x_p, m)
    neg, count = masked_sq_dist(x_a, x_n, m)
    return combine_contrastive(pos, neg, count, lambda_neg, cfg)


def background_loss(x_a: torch.Tensor, x_p: torch.Tensor, x_n: torch.Tensor,
                    x_u1: torch.Tensor, x_u2: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    """Keep non-subject regions close to the unmodulated predictions."""
    bg = ~m
    terms = (
        masked_distance(x_a, x_u1, bg)
        + masked_distance(x_p, x_u2, bg)
        + masked_distance(x_n, x_u1, bg)
    )
    return terms


def total_loss(l_con: torch.Tensor, l_back: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    back = l_back if cfg.use_background else torch.zeros_like(torch.as_tensor(l_back))
    return cfg.lambda_con * torch.as_tensor(l_con) + cfg.lambda_back * back
