from .render import (
    GLYPHS,
    PALETTE_NAMES,
    ToyContext,
    ToyExample,
    ToyIdentity,
    background_pattern,
    render_example,
    sample_context,
    sample_identity,
)
from .text import CONTEXT_TOKENS, PromptTokens, TextEncoder, Vocab, default_vocab
from .denoiser import ToyDenoiser, ToyDenoiserConfig, build_toy_denoiser
from .features import classify_palette, estimate_mask, extract_identity_features
from .dataset import load_dataset, make_dataset, save_dataset
from .pretrain import Backbone, appearance_token, load_backbone, pretrain_generator, save_backbone

__all__ = [
    "GLYPHS", "PALETTE_NAMES", "ToyContext", "ToyExample", "ToyIdentity",
    "background_pattern", "render_example", "sample_context", "sample_identity",
    "CONTEXT_TOKENS", "PromptTokens", "TextEncoder", "Vocab", "default_vocab",
    "ToyDenoiser", "ToyDenoiserConfig", "build_toy_denoiser",
    "classify_palette", "estimate_mask", "extract_identity_features",
    "load_dataset", "make_dataset", "save_dataset",
    "Backbone", "appearance_token", "load_backbone", "pretrain_generator", "save_backbone",
]
