"""Latent-code-to-pseudo-word mapping network and prompt-embedding insertion."""

from __future__ import annotations

import base64
import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .core import RunSeed, _substream_seed

_ACTIVATIONS = {"silu": nn.SiLU, "relu": nn.ReLU, "gelu": nn.GELU, "tanh": nn.Tanh}


@dataclass
class MappingNetworkConfig:
    n_layers: int = 4
    input_dim: int = 64       # latent code dimension
    hidden_dim: int = 256
    output_dim: int = 64      # token embedding dimension
    activation: str = "silu"
    init_scheme: str = "kaiming"

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if min(self.input_dim, self.hidden_dim, self.output_dim) < 1:
            raise ValueError("dims must be positive")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


class MappingNetwork(nn.Module):
    """MLP producing a pseudo-word embedding from a standard-normal code."""

    def __init__(self, config: MappingNetworkConfig):
        super().__init__()
        self.config = config
        dims = (
            [config.input_dim]
            + [config.hidden_dim] * (config.n_layers - 1)
            + [config.output_dim]
        )
        act = _ACTIVATIONS[config.activation]
        layers: list[nn.Module] = []
        for a, b in zip(dims[:-2], dims[1:-1]):
            layers += [nn.Linear(a, b), act()]
        layers.append(nn.Linear(dims[-2], dims[-1]))
        self.net = nn.Sequential(*layers)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.config.input_dim:
            raise ValueError(
                f"code dim {z.shape[-1]} != expected {self.config.input_dim}")
        return self.net(z)


def init_mapping_network(config: MappingNetworkConfig, seed: RunSeed,
                         mean_token: torch.Tensor) -> MappingNetwork:
    """Seeded init: variance-preserving hidden layers, zero final weights,
    final bias at the embedding-table mean so every code starts at a neutral token."""
    net = MappingNetwork(config)
    g = torch.Generator()
    g.manual_seed(_substream_seed(seed.seed, "mapper-init", 0))
    with torch.no_grad():
        linears = [m for m in net.net if isinstance(m, nn.Linear)]
        for lin in linears[:-1]:
            fan_in = lin.weight.shape[1]
            std = (2.0 / fan_in) ** 0.5
            lin.weight.copy_(torch.randn(lin.weight.shape, generator=g) * std)
            lin.bias.zero_()
        last = linears[-1]
        last.weight.zero_()
        if mean_token.shape != last.bias.shape:
            raise ValueError("mean_token dim does not match output_dim")
        last.bias.copy_(mean_token)
    return net


def map_code(net: MappingNetwork, z: torch.Tensor) -> torch.Tensor:
    return net(z)


@dataclass
class PromptEmbedding:
    """Token-embedding matrix [s, d] plus the target concept token position."""

    matrix: torch.Tensor
    concept_index: int

    def __post_init__(self):
        if self.matrix.ndim != 2:
            raise ValueError("matrix must be [s, d]")
        if not 0 <= self.concept_index < self.matrix.shape[0]:
            raise ValueError("concept_index out of range")


def insert_rows(matrix: torch.Tensor, w: torch.Tensor, i: int) -> torch.Tensor:
    """Return a copy of [s, d] matrix with row w inserted at position i."""
    s = matrix.shape[0]
    if not 0 <= i <= s:
        raise ValueError(f"insert index {i} out of range for length {s}")
    if w.shape != (matrix.shape[1],):
        raise ValueError("pseudo-word dim mismatch")
    return torch.cat([matrix[:i], w.unsqueeze(0), matrix[i:]], dim=0)


def remove_rows(matrix: torch.Tensor, i: int) -> torch.Tensor:
    """Return a copy of [s, d] matrix with row i removed; inverse of insert_rows."""
    if not 0 <= i < matrix.shape[0]:
        raise ValueError(f"remove index {i} out of range for length {matrix.shape[0]}")
    return torch.cat([matrix[:i], matrix[i + 1:]], dim=0)


def insert(e: PromptEmbedding, w: torch.Tensor, i: int,
           max_len: int | None = None) -> PromptEmbedding:
    """Insert pseudo-word w at row i; the concept token shifts right by one.

    If max_len is given and exceeded, trailing rows (padding) are dropped.
    """
    if not 0 <= i < e.matrix.shape[0]:
        raise ValueError(f"insert index {i} out of range")
    m = insert_rows(e.matrix, w, i)
    if max_len is not None and m.shape[0] > max_len:
        m = m[:max_len]
    ci = e.concept_index + 1 if i <= e.concept_index else e.concept_index
    return PromptEmbedding(m, ci)


def insert_many(e: PromptEmbedding, pairs: list[tuple[torch.Tensor, int]]) -> PromptEmbedding:
    """Insert several pseudo-words at distinct original positions.

    Processed in descending index order so earlier insertions do not shift
    the positions of later ones; the pair list order is irrelevant.
    """
    indices = [i for _, i in pairs]
    if len(set(indices)) != len(indices):
        raise ValueError("duplicate insertion indices")
    out = e
    for w, i in sorted(pairs, key=lambda p: -p[1]):
        out = insert(out, w, i)
    return out


class AssociationStore:
    """Named latent codes persisted as JSON so instances can be reused across sessions."""

    def __init__(self, path: str):
        self.path = path
        self._codes: dict[str, np.ndarray] = {}
        if os.path.exists(path):
            self._load()

    def _load(self):
        with open(self.path) as f:
            obj = json.load(f)
        self._codes = {
            name: np.frombuffer(base64.b64decode(b64), dtype="<f4").copy()
            for name, b64 in obj["codes"].items()
        }

    def save(self):
        obj = {"codes": {
            name: base64.b64encode(np.ascontiguousarray(v, dtype="<f4").tobytes()).decode()
            for name, v in self._codes.items()
        }}
        with open(self.path, "w") as f:
            json.dump(obj, f, indent=2, sort_keys=True)

    def put(self, name: str, code: torch.Tensor):
        self._codes[name] = code.detach().cpu().numpy().astype("<f4")

    def get(self, name: str) -> torch.Tensor:
        if name not in self._codes:
            raise KeyError(f"no stored code named {name!r}")
        return torch.from_numpy(self._codes[name].copy())

    def names(self) -> list[str]:
        return sorted(self._codes)
