"""Toy vocabulary, caption tokenization, and the small frozen text encoder."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import torch
import torch.nn as nn

PAD = "<pad>"
CONCEPT_TOKENS = ("person",)
CONTEXT_TOKENS = ("park", "office", "beach", "night")

_ADJECTIVES = (
    "bright", "quiet", "small", "large", "busy", "calm", "open", "wide",
    "cool", "warm", "soft", "sunny", "cloudy", "early", "late", "plain",
    "clear", "still", "fresh", "misty", "windy", "mild", "hazy", "gray",
)
_FILLERS = (
    "a", "an", "the", "in", "at", "on", "of", "by", "is", "near", "with",
    "photo", "image", "picture", "shows", "scene", "view", "there", "some",
    "one", "two", "very", "quite", "good", "fine", "new", "old", "far",
    "lone", "deep", "slow", "here", "now", "day",
)

CAPTION_LEN = 12
MAX_SEQ_LEN = 16


@dataclass(frozen=True)
class PromptTokens:
    """Token id sequence with the position of its single concept token."""

    ids: tuple[int, ...]
    concept_index: int

    def __post_init__(self):
        if not 0 <= self.concept_index < len(self.ids):
            raise ValueError("concept_index out of range")


class Vocab:
    def __init__(self, tokens: list[str]):
        self.tokens = list(tokens)
        self.ids = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.ids) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.adjectives = [t for t in self.tokens if t in _ADJECTIVES]

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return self.ids[PAD]

    def id_of(self, token: str) -> int:
        if token not in self.ids:
            raise KeyError(f"unknown token {token!r}")
        return self.ids[token]

    def is_concept(self, token_id: int) -> bool:
        return self.tokens[token_id] in CONCEPT_TOKENS

    def caption(self, words: list[str], concept: str, length: int = CAPTION_LEN) -> PromptTokens:
        """Pad a word list to fixed length and locate its concept token."""
        if len(words) > length:
            raise ValueError("caption longer than fixed length")
        concept_positions = [k for k, w in enumerate(words) if w in CONCEPT_TOKENS]
        if concept_positions != [words.index(concept)] or words.count(concept) != 1:
            raise ValueError("caption must contain exactly one concept token")
        padded = words + [PAD] * (length - len(words))
        return PromptTokens(tuple(self.id_of(w) for w in padded), words.index(concept))


@lru_cache(maxsize=1)
def default_vocab() -> Vocab:
    return Vocab([PAD, *CONCEPT_TOKENS, *CONTEXT_TOKENS, *_FILLERS, *_ADJECTIVES])


class SelfAttentionBlock(nn.Module):
    def __init__(self, d: int, n_heads: int = 2):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.attn = nn.MultiheadAttention(d, n_heads, batch_first=True)
        self.ln2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, 2 * d), nn.SiLU(), nn.Linear(2 * d, d))

    def forward(self, x):
        h = self.ln1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.ln2(x))


class TextEncoder(nn.Module):
    """Embedding lookup + positional addition + two self-attention mixing blocks."""

    def __init__(self, vocab_size: int, d: int = 64, max_len: int = MAX_SEQ_LEN,
                 n_blocks: int = 2):
        super().__init__()
        self.d = d
        self.max_len = max_len
        self.vocab_size = vocab_size
        self.embedding = nn.Embedding(vocab_size, d)
        self.pos = nn.Parameter(torch.randn(max_len, d) * 0.02)
        self.blocks = nn.ModuleList(SelfAttentionBlock(d) for _ in range(n_blocks))

    def lookup(self, ids: torch.Tensor) -> torch.Tensor:
        if torch.any(ids < 0) or torch.any(ids >= self.vocab_size):
            raise ValueError("token id outside vocabulary")
        return self.embedding(ids)

    def mean_token(self) -> torch.Tensor:
        return self.embedding.weight.mean(dim=0).detach()

    def encode_embedding(self, e: torch.Tensor) -> torch.Tensor:
        """Encode an (optionally modulated) token-embedding matrix [s,d] or [B,s,d]."""
        squeeze = e.ndim == 2
        if squeeze:
            e = e.unsqueeze(0)
        s = e.shape[1]
        if s > self.max_len:
            raise ValueError(f"sequence length {s} exceeds max {self.max_len}")
        x = e + self.pos[:s]
        for block in self.blocks:
            x = block(x)
        return x.squeeze(0) if squeeze else x

    def encode_tokens(self, ids: torch.Tensor) -> torch.Tensor:
        return self.encode_embedding(self.lookup(ids))
