"""Shared numeric primitives: noise schedules, seeded randomness, checkpoints."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class NoiseSchedule:
    """Strictly decreasing alpha sequence indexed by t in {1..T}."""

    alphas: torch.Tensor  # float64, shape [T]

    def __post_init__(self):
        a = self.alphas
        if a.ndim != 1 or a.numel() < 1:
            raise ValueError("alphas must be a non-empty 1-D tensor")
        if not torch.all((a > 0) & (a <= 1)):
            raise ValueError("alphas must lie in (0, 1]")
        if a.numel() > 1 and not torch.all(a[1:] < a[:-1]):
            raise ValueError("alphas must be strictly decreasing")

    @property
    def T(self) -> int:
        return int(self.alphas.numel())

    def alpha(self, t: int) -> float:
        if not 1 <= t <= self.T:
            raise ValueError(f"t={t} outside schedule range [1, {self.T}]")
        return float(self.alphas[t - 1])

    def alpha_at(self, t: torch.Tensor) -> torch.Tensor:
        """Gather alphas for a tensor of timesteps (values in {1..T})."""
        if torch.any(t < 1) or torch.any(t > self.T):
            raise ValueError("timestep tensor outside schedule range")
        return self.alphas[t.long() - 1]


def make_linear_schedule(T: int, alpha_start: float, alpha_end: float) -> NoiseSchedule:
    """Alphas linearly interpolated from alpha_start down to alpha_end."""
    if T < 2:
        raise ValueError("T must be >= 2")
    if not (1.0 >= alpha_start > alpha_end > 0.0):
        raise ValueError("require 1 >= alpha_start > alpha_end > 0")
    alphas = torch.linspace(alpha_start, alpha_end, T, dtype=torch.float64)
    return NoiseSchedule(alphas)


def _substream_seed(seed: int, label: str, index: int) -> int:
    h = hashlib.blake2b(f"{seed}:{label}:{index}".encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


@dataclass(frozen=True)
class RunSeed:
    """Root seed for a run; every draw goes through a labeled substream."""

    seed: int

    def stream(self, label: str) -> "SeedStream":
        return SeedStream(self, label)

    def to_json(self) -> dict:
        return {"seed": self.seed}

    @staticmethod
    def from_json(obj: dict) -> "RunSeed":
        return RunSeed(int(obj["seed"]))


class SeedStream:
    """Stateful draw sequence; (seed, label, call-index) fully determines each draw."""

    def __init__(self, run_seed: RunSeed, label: str):
        self.run_seed = run_seed
        self.label = label
        self._calls = 0

    def fork(self, sublabel: str) -> "SeedStream":
        return SeedStream(self.run_seed, f"{self.label}/{sublabel}")

    def _next_generator(self) -> torch.Generator:
        g = torch.Generator()
        g.manual_seed(_substream_seed(self.run_seed.seed, self.label, self._calls))
        self._calls += 1
        return g

    def normal(self, *shape: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        return torch.randn(shape, generator=self._next_generator(), dtype=dtype)

    def uniform(self, *shape: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        return torch.rand(shape, generator=self._next_generator(), dtype=dtype)

    def randint(self, low: int, high: int, *shape: int) -> torch.Tensor:
        """Integers uniform over [low, high)."""
        return torch.randint(low, high, shape, generator=self._next_generator())

    def permutation(self, n: int) -> torch.Tensor:
        return torch.randperm(n, generator=self._next_generator())


def seeded_normal(seed: RunSeed, stream: str, shape, index: int = 0,
                  dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """One-shot deterministic standard-normal draw for (seed, stream, index)."""
    g = torch.Generator()
    g.manual_seed(_substream_seed(seed.seed, stream, index))
    return torch.randn(tuple(shape), generator=g, dtype=dtype)


def config_hash(cfg: dict) -> str:
    """Stable short hash of a JSON-serializable config dict."""
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


# --- checkpoint container: raw little-endian float32 arrays + JSON manifest ---

def save_checkpoint(out_dir: str, arrays: dict[str, np.ndarray], extra: dict | None = None):
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "arrays": {},
        "extra": extra or {},
    }
    for name, arr in arrays.items():
        arr32 = np.ascontiguousarray(arr, dtype="<f4")
        fname = name.replace("/", "_").replace(".", "_") + ".bin"
        with open(os.path.join(out_dir, fname), "wb") as f:
            f.write(arr32.tobytes())
        manifest["arrays"][name] = {"file": fname, "shape": list(arr32.shape)}
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def load_checkpoint(ckpt_dir: str) -> tuple[dict[str, np.ndarray], dict]:
    with open(os.path.join(ckpt_dir, "manifest.json")) as f:
        manifest = json.load(f)
    if manifest["format_version"] != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {manifest['format_version']}")
    arrays = {}
    for name, meta in manifest["arrays"].items():
        raw = np.fromfile(os.path.join(ckpt_dir, meta["file"]), dtype="<f4")
        arrays[name] = raw.reshape(meta["shape"]).copy()
    return arrays, manifest


def save_module(out_dir: str, module: torch.nn.Module, extra: dict | None = None):
    arrays = {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}
    save_checkpoint(out_dir, arrays, extra=extra)


def load_module(ckpt_dir: str, module: torch.nn.Module) -> dict:
    """Load checkpoint arrays into module; returns the manifest 'extra' dict."""
    arrays, manifest = load_checkpoint(ckpt_dir)
    state = {k: torch.from_numpy(v) for k, v in arrays.items()}
    module.load_state_dict(state)
    return manifest["extra"]


def module_param_hash(module: torch.nn.Module) -> str:
    """Hash of every parameter and buffer, for freeze-invariance checks."""
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()
