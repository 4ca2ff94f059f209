"""Procedural subject/background renderer with analytically known masks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..core import RunSeed
from .text import CONTEXT_TOKENS, PromptTokens, default_vocab

IMAGE_SIZE = 32
CHANNELS = 3

GLYPHS = ("disc", "square", "triangle", "ring")

# (top color, bottom color) of a vertical gradient, values in [0, 1]
PALETTES = (
    ((0.35, 0.68, 0.30), (0.13, 0.42, 0.18)),   # park
    ((0.78, 0.78, 0.82), (0.52, 0.52, 0.58)),   # office
    ((0.40, 0.72, 0.95), (0.92, 0.82, 0.55)),   # beach
    ((0.04, 0.04, 0.28), (0.30, 0.10, 0.38)),   # night
)
PALETTE_NAMES = CONTEXT_TOKENS  # palette index == context token index

# subject anchor centers (row, col); chosen so the max-size glyph keeps a
# 3-pixel border ring clear for palette classification
LAYOUT_ANCHORS = ((12, 12), (12, 19), (19, 12), (19, 19))


@dataclass(frozen=True)
class ToyIdentity:
    hue: float                 # [0, 1)
    secondary_hue: float       # [0, 1)
    shape: str                 # one of GLYPHS
    size: float                # [0.2, 0.4] of image width
    stripe_freq: int           # {0..4}

    def __post_init__(self):
        if self.shape not in GLYPHS:
            raise ValueError(f"unknown glyph {self.shape!r}")
        if not 0.2 <= self.size <= 0.4:
            raise ValueError("size outside [0.2, 0.4]")
        if not 0 <= self.stripe_freq <= 4:
            raise ValueError("stripe_freq outside {0..4}")

    def to_json(self):
        return {"hue": self.hue, "secondary_hue": self.secondary_hue,
                "shape": self.shape, "size": self.size, "stripe_freq": self.stripe_freq}

    @staticmethod
    def from_json(obj):
        return ToyIdentity(obj["hue"], obj["secondary_hue"], obj["shape"],
                           obj["size"], int(obj["stripe_freq"]))


@dataclass(frozen=True)
class ToyContext:
    palette: int   # index into PALETTES; also the context token
    layout: int    # index into LAYOUT_ANCHORS

    def __post_init__(self):
        if not 0 <= self.palette < len(PALETTES):
            raise ValueError("palette index out of range")
        if not 0 <= self.layout < len(LAYOUT_ANCHORS):
            raise ValueError("layout index out of range")

    @property
    def context_token(self) -> str:
        return PALETTE_NAMES[self.palette]

    def to_json(self):
        return {"palette": self.palette, "layout": self.layout}

    @staticmethod
    def from_json(obj):
        return ToyContext(int(obj["palette"]), int(obj["layout"]))


@dataclass
class ToyExample:
    id: str
    image: torch.Tensor        # [3, H, W] float32 in [-1, 1]
    caption_1: PromptTokens
    caption_2: PromptTokens
    mask: torch.Tensor         # [H, W] bool, subject pixels
    identity: ToyIdentity
    context: ToyContext


def hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return np.array(rgb, dtype=np.float64)


def background_pattern(palette: int) -> np.ndarray:
    """Deterministic background image [3, H, W] in [0, 1] for one palette."""
    top, bottom = PALETTES[palette]
    frac = np.linspace(0.0, 1.0, IMAGE_SIZE)[:, None]
    rows = (1 - frac) * np.array(top) + frac * np.array(bottom)   # [H, 3]
    return np.repeat(rows.T[:, :, None], IMAGE_SIZE, axis=2)


def glyph_mask(shape: str, size: float, center: tuple[int, int]) -> np.ndarray:
    half = size * IMAGE_SIZE / 2.0
    cy, cx = center
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE]
    dy, dx = yy - cy, xx - cx
    if shape == "disc":
        return dx ** 2 + dy ** 2 <= half ** 2
    if shape == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= half
    if shape == "triangle":
        return (dy >= -half) & (dy <= half) & (np.abs(dx) <= (dy + half) / 2.0)
    if shape == "ring":
        r2 = dx ** 2 + dy ** 2
        return ((0.55 * half) ** 2 <= r2) & (r2 <= half ** 2)
    raise ValueError(f"unknown glyph {shape!r}")


def _subject_colors(identity: ToyIdentity, mask: np.ndarray,
                    center: tuple[int, int]) -> np.ndarray:
    """Per-pixel subject RGB [3, H, W]; stripes alternate the secondary hue."""
    base = hsv_to_rgb(identity.hue, 0.85, 0.9)
    img = np.zeros((3, IMAGE_SIZE, IMAGE_SIZE))
    img[:, mask] = base[:, None]
    if identity.stripe_freq > 0:
        half = identity.size * IMAGE_SIZE / 2.0
        cy = center[0]
        yy = np.arange(IMAGE_SIZE)[:, None].repeat(IMAGE_SIZE, axis=1)
        band = np.floor((yy - cy + half) / (2 * half) * (2 * identity.stripe_freq))
        stripe = (band.astype(int) % 2 == 1) & mask
        img[:, stripe] = hsv_to_rgb(identity.secondary_hue, 0.85, 0.9)[:, None]
    return img


def _caption_pair(context: ToyContext, seed: RunSeed, tag: str) -> tuple[PromptTokens, PromptTokens]:
    vocab = default_vocab()
    stream = seed.stream(f"captions/{tag}")
    adj1 = vocab.adjectives[int(stream.randint(0, len(vocab.adjectives)).item())]
    adj2 = vocab.adjectives[int(stream.randint(0, len(vocab.adjectives)).item())]
    ctx = context.context_token
    words_1 = ["a", adj1, "person", "in", "the", ctx]
    words_2 = ["photo", "of", "one", adj2, "person", "at", "the", ctx, "scene"]
    return (vocab.caption(words_1, concept="person"),
            vocab.caption(words_2, concept="person"))


def render_example(identity: ToyIdentity, context: ToyContext, seed: RunSeed,
                   example_id: str = "0") -> ToyExample:
    """Deterministic image, exact subject mask, and two templated captions."""
    center = LAYOUT_ANCHORS[context.layout]
    mask = glyph_mask(identity.shape, identity.size, center)
    img = background_pattern(context.palette).copy()
    subject = _subject_colors(identity, mask, center)
    img[:, mask] = subject[:, mask]
    cap1, cap2 = _caption_pair(context, seed, example_id)
    return ToyExample(
        id=example_id,
        image=torch.from_numpy((img * 2.0 - 1.0).astype(np.float32)),
        caption_1=cap1,
        caption_2=cap2,
        mask=torch.from_numpy(mask),
        identity=identity,
        context=context,
    )


def sample_identity(stream) -> ToyIdentity:
    return ToyIdentity(
        hue=float(stream.uniform(1).item()),
        secondary_hue=float(stream.uniform(1).item()),
        shape=GLYPHS[int(stream.randint(0, len(GLYPHS)).item())],
        size=0.2 + 0.2 * float(stream.uniform(1).item()),
        stripe_freq=int(stream.randint(0, 5).item()),
    )


def sample_context(stream) -> ToyContext:
    return ToyContext(
        palette=int(stream.randint(0, len(PALETTES)).item()),
        layout=int(stream.randint(0, len(LAYOUT_ANCHORS)).item()),
    )
