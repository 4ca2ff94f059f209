"""Anchor/positive/negative triplet construction for contrastive training."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .core import NoiseSchedule, RunSeed, _substream_seed
from .diffusion import forward_diffuse
from .mapper import MappingNetwork, PromptEmbedding, insert


@dataclass
class PromptTriplet:
    anchor: PromptEmbedding    # caption 1 + w1
    positive: PromptEmbedding  # caption 2 + w1
    negative: PromptEmbedding  # caption 1 + w2


@dataclass
class NoisyTriplet:
    anchor: torch.Tensor
    positive: torch.Tensor
    negative: torch.Tensor
    t: int
    eps_1: torch.Tensor
    eps_2: torch.Tensor


def build_prompt_triplet(e1: PromptEmbedding, e2: PromptEmbedding, i: int, j: int,
                         z1: torch.Tensor, z2: torch.Tensor,
                         net: MappingNetwork) -> PromptTriplet:
    """Anchor = caption1+w1 at i; positive = caption2+w1 at j; negative = caption1+w2 at i."""
    w1 = net(z1)
    w2 = net(z2)
    return PromptTriplet(
        anchor=insert(e1, w1, i),
        positive=insert(e2, w1, j),
        negative=insert(e1, w2, i),
    )


def build_noisy_triplet(x: torch.Tensor, t: int, eps1: torch.Tensor, eps2: torch.Tensor,
                        sched: NoiseSchedule) -> NoisyTriplet:
    """Anchor and negative share the same noise draw; the positive uses the other."""
    anchor = forward_diffuse(x, t, eps1, sched)
    positive = forward_diffuse(x, t, eps2, sched)
    return NoisyTriplet(
        anchor=anchor, positive=positive, negative=anchor.clone(),
        t=t, eps_1=eps1, eps_2=eps2,
    )


def sample_training_inputs(example, seed: RunSeed, step: int, code_dim: int,
                           sched: NoiseSchedule):
    """Draw (z1, z2, t, eps1, eps2) for one example at one step, deterministically.

    z1 != z2 is guaranteed by re-drawing z2 on (measure-zero) collision.
    """
    tag = f"{example.id}/{step}"

    def gen(label, index=0):
        g = torch.Generator()
        g.manual_seed(_substream_seed(seed.seed, f"{label}/{tag}", index))
        return g

    z1 = torch.randn(code_dim, generator=gen("codes-a"))
    z2 = torch.randn(code_dim, generator=gen("codes-b"))
    redraw = 0
    while torch.equal(z1, z2):
        redraw += 1
        z2 = torch.randn(code_dim, generator=gen("codes-b", redraw))
    t = int(torch.randint(1, sched.T + 1, (1,), generator=gen("timesteps")).item())
    shape = tuple(example.image.shape)
    eps1 = torch.randn(shape, generator=gen("noise-a"))
    eps2 = torch.randn(shape, generator=gen("noise-b"))
    return z1, z2, t, eps1, eps2
