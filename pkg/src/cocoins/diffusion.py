"""Forward diffusion, single-step clean-image estimates, and deterministic sampling."""

from __future__ import annotations

import math
from typing import Protocol, runtime_checkable

import torch

from .core import NoiseSchedule, RunSeed


@runtime_checkable
class Denoiser(Protocol):
    """Noise predictor conditioned on an encoded prompt and a timestep."""

    def predict(self, noisy: torch.Tensor, condition: torch.Tensor, t) -> torch.Tensor:
        ...


def _alpha_factor(sched: NoiseSchedule, t, like: torch.Tensor) -> torch.Tensor:
    """sqrt(alpha_t) and sqrt(1-alpha_t) broadcastable against `like`."""
    if isinstance(t, torch.Tensor):
        a = sched.alpha_at(t).to(like.dtype)
        # per-item t: broadcast over trailing image dims
        while a.ndim < like.ndim:
            a = a.unsqueeze(-1)
        return a
    return torch.tensor(sched.alpha(int(t)), dtype=like.dtype)


def forward_diffuse(x: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """x_t = sqrt(alpha_t) * x + sqrt(1 - alpha_t) * eps."""
    if eps.shape != x.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != x shape {tuple(x.shape)}")
    a = _alpha_factor(sched, t, x)
    return torch.sqrt(a) * x + torch.sqrt(1.0 - a) * eps


def ddim_x0(x_t: torch.Tensor, eps_hat: torch.Tensor, t, sched: NoiseSchedule) -> torch.Tensor:
    """Single-step clean-image estimate: (x_t - sqrt(1-alpha_t) * eps_hat) / sqrt(alpha_t)."""
    if eps_hat.shape != x_t.shape:
        raise ValueError("eps_hat shape mismatch")
    a = _alpha_factor(sched, t, x_t)
    return (x_t - torch.sqrt(1.0 - a) * eps_hat) / torch.sqrt(a)


def sampling_timesteps(T: int, steps: int) -> list[int]:
    """Evenly spaced decreasing timesteps over {1..T}, starting at T."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if steps > T:
        raise ValueError(f"steps={steps} exceeds schedule length T={T}")
    if steps == 1:
        return [T]
    ts = [int(round(v)) for v in torch.linspace(T, 1, steps).tolist()]
    # rounding can introduce duplicates at small T; enforce strict decrease
    out = [ts[0]]
    for t in ts[1:]:
        out.append(min(t, out[-1] - 1))
    if out[-1] < 1:
        raise ValueError("too many steps for this schedule")
    return out


@torch.no_grad()
def ddim_sample(denoiser: Denoiser, condition: torch.Tensor, sched: NoiseSchedule,
                steps: int, seed: RunSeed, shape: tuple[int, ...],
                guidance_scale: float = 1.0,
                uncond_condition: torch.Tensor | None = None,
                noise_stream: str = "sample-noise") -> torch.Tensor:
    """Deterministic (eta=0) sampler; bit-identical given (seed, condition, params)."""
    from .core import seeded_normal

    x = seeded_normal(seed, noise_stream, shape)
    ts = sampling_timesteps(sched.T, steps)
    for i, t in enumerate(ts):
        eps_hat = denoiser.predict(x, condition, t)
        if guidance_scale != 1.0:
            if uncond_condition is None:
                raise ValueError("guidance requires an unconditional embedding")
            eps_u = denoiser.predict(x, uncond_condition, t)
            eps_hat = eps_u + guidance_scale * (eps_hat - eps_u)
        x0 = ddim_x0(x, eps_hat, t, sched)
        if i + 1 == len(ts):
            return x0
        a_prev = sched.alpha(ts[i + 1])
        x = math.sqrt(a_prev) * x0 + math.sqrt(1.0 - a_prev) * eps_hat
    return x
