"""Subject-consistent toy generation: latent codes -> pseudo-words -> prompts."""

from .core import NoiseSchedule, RunSeed, make_linear_schedule, seeded_normal
from .diffusion import Denoiser, ddim_sample, ddim_x0, forward_diffuse
from .losses import LossConfig, contrastive_loss, background_loss, total_loss
from .mapper import (
    AssociationStore,
    MappingNetwork,
    MappingNetworkConfig,
    PromptEmbedding,
    init_mapping_network,
    insert,
    insert_many,
    insert_rows,
    map_code,
    remove_rows,
)
from .triplets import NoisyTriplet, PromptTriplet, build_noisy_triplet, build_prompt_triplet

__all__ = [
    "NoiseSchedule", "RunSeed", "make_linear_schedule", "seeded_normal",
    "Denoiser", "ddim_sample", "ddim_x0", "forward_diffuse",
    "LossConfig", "contrastive_loss", "background_loss", "total_loss",
    "AssociationStore", "MappingNetwork", "MappingNetworkConfig", "PromptEmbedding",
    "init_mapping_network", "insert", "insert_many", "insert_rows",
    "map_code", "remove_rows",
    "NoisyTriplet", "PromptTriplet", "build_noisy_triplet", "build_prompt_triplet",
]

__version__ = "0.1.0"
