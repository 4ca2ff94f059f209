"""Consistency, diversity, and fidelity metrics plus the ablation sweep runner."""

from __future__ import annotations

import csv
import dataclasses
import itertools
import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .core import RunSeed, config_hash
from .losses import LossConfig
from .mapper import MappingNetwork
from .toyworld.features import classify_palette, estimate_mask, extract_identity_features
from .toyworld.pretrain import Backbone
from .toyworld.render import ToyExample
from .toyworld.text import PromptTokens, default_vocab

DIVERSITY_TRANSFORM_NOTE = (
    "diversity reported as 1 - mean pairwise cosine of per-code mean features "
    "(higher = more diverse)"
)


@dataclass
class EvalRun:
    """Generated images and identity features indexed by (code name, prompt index)."""

    code_names: list[str]
    prompts: list[dict]                       # {"caption": PromptTokens, "context": int}
    images: dict[tuple[str, int], torch.Tensor] = field(default_factory=dict)
    features: dict[tuple[str, int], np.ndarray] = field(default_factory=dict)
    seed: RunSeed | None = None


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


def _per_code_features(run: EvalRun) -> dict[str, list[np.ndarray]]:
    out: dict[str, list[np.ndarray]] = {name: [] for name in run.code_names}
    for (name, _), feat in sorted(run.features.items()):
        out[name].append(feat)
    return out


def consistency_score(run: EvalRun) -> float:
    """Mean over codes of mean pairwise cosine similarity among that code's images."""
    per_code = _per_code_features(run)
    means = []
    for name, feats in per_code.items():
        if len(feats) < 2:
            raise ValueError(f"code {name!r} has fewer than 2 images")
        sims = [_cosine(a, b) for a, b in itertools.combinations(feats, 2)]
        means.append(float(np.mean(sims)))
    return float(np.mean(means))


def diversity_score(run: EvalRun) -> float:
    """1 - mean pairwise cosine between re-normalized per-code mean features."""
    per_code = _per_code_features(run)
    if len(per_code) < 2:
        raise ValueError("diversity requires at least 2 codes")
    centroids = []
    for feats in per_code.values():
        m = np.mean(feats, axis=0)
        centroids.append(m / np.linalg.norm(m))
    sims = [_cosine(a, b) for a, b in itertools.combinations(centroids, 2)]
    return 1.0 - float(np.mean(sims))


def fidelity_score(run: EvalRun) -> float:
    """Fraction of images whose classified background palette matches the prompt."""
    hits, total = 0, 0
    for (name, pidx), img in run.images.items():
        hits += int(classify_palette(img) == run.prompts[pidx]["context"])
        total += 1
    return hits / total


def association_margin(run: EvalRun) -> float:
    """Mean same-code feature cosine minus mean cross-code cosine."""
    keys = sorted(run.features)
    same, cross = [], []
    for (ka, kb) in itertools.combinations(keys, 2):
        sim = _cosine(run.features[ka], run.features[kb])
        (same if ka[0] == kb[0] else cross).append(sim)
    return float(np.mean(same) - np.mean(cross))


def eval_prompts(contexts: list[int] | None = None) -> list[dict]:
    """One held-out portrait-style caption per context palette."""
    vocab = default_vocab()
    contexts = contexts if contexts is not None else [0, 1, 2, 3, 0, 1]
    from .toyworld.render import PALETTE_NAMES
    prompts = []
    for n, p in enumerate(contexts):
        adj = vocab.adjectives[n % len(vocab.adjectives)]
        words = ["a", adj, "person", "in", "the", PALETTE_NAMES[p]]
        prompts.append({"caption": vocab.caption(words, concept="person"), "context": p})
    return prompts


def generate_eval_run(mapper: MappingNetwork, backbone: Backbone,
                      codes: dict[str, torch.Tensor], prompts: list[dict],
                      seed: RunSeed, steps: int = 20) -> EvalRun:
    """Generate every (code, prompt) pair with a pair-specific recorded noise stream."""
    from .trainer import generate

    run = EvalRun(code_names=sorted(codes), prompts=prompts, seed=seed)
    for name in run.code_names:
        for pidx, prompt in enumerate(prompts):
            img = generate(mapper, backbone, prompt["caption"], codes[name], seed,
                           steps=steps, noise_stream=f"eval/{name}/{pidx}")
            run.images[(name, pidx)] = img
            mask = estimate_mask(img)
            run.features[(name, pidx)] = extract_identity_features(img, mask)
    return run


def score_run(run: EvalRun) -> dict:
    return {
        "consistency": consistency_score(run),
        "diversity": diversity_score(run),
        "fidelity": fidelity_score(run),
        "association_margin": association_margin(run),
        "n_codes": len(run.code_names),
        "n_prompts": len(run.prompts),
        "diversity_transform": DIVERSITY_TRANSFORM_NOTE,
    }


def write_report(path: str, scores: dict, cfg_hash: str, seed: RunSeed):
    report = dict(scores, config_hash=cfg_hash, seed=seed.seed)
    with open(path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)


def sample_codes(n: int, code_dim: int, seed: RunSeed, stream: str = "eval-codes") -> dict[str, torch.Tensor]:
    s = seed.stream(stream)
    return {f"code{k:02d}": s.normal(code_dim) for k in range(n)}


def ablation_sweep(configs: list[dict], base_cfg: LossConfig,
                   examples: list[ToyExample], backbone: Backbone,
                   seed: RunSeed, K: int,
                   n_codes: int = 8, steps: int = 20,
                   lr: float = 1e-3, batch_size: int = 8,
                   weight_decay: float = 0.0,
                   out_csv: str | None = None,
                   verbose: bool = False) -> list[dict]:
    """Train one mapper per config override at a fixed seed and score each.

    A diverging run is recorded with an error note instead of aborting the sweep.
    """
    from .trainer import train_mapper

    rows = []
    for overrides in configs:
        name = overrides.get("name", "+".join(f"{k}={v}" for k, v in overrides.items()))
        cfg = dataclasses.replace(base_cfg,
                                  **{k: v for k, v in overrides.items() if k != "name"})
        chash = config_hash(dataclasses.asdict(cfg))
        row = {"name": name, "config_hash": chash}
        try:
            mapper, _ = train_mapper(examples, backbone, cfg, K, seed,
                                     lr=lr, batch_size=batch_size,
                                     weight_decay=weight_decay, verbose=verbose)
            codes = sample_codes(n_codes, mapper.config.input_dim, seed)
            run = generate_eval_run(mapper, backbone, codes, eval_prompts(), seed,
                                    steps=steps)
            scores = score_run(run)
            row.update({k: scores[k] for k in
                        ("consistency", "diversity", "fidelity", "association_margin")})
        except RuntimeError as err:
            row["error"] = str(err)
        rows.append(row)
        if verbose:
            print(row)
    if out_csv:
        fields = ["name", "config_hash", "consistency", "diversity", "fidelity",
                  "association_margin", "error"]
        with open(out_csv, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=fields)
            writer.writeheader()
            for row in rows:
                writer.writerow({k: row.get(k, "") for k in fields})
    return rows


def contact_sheet(run: EvalRun, path: str):
    """PNG grid of generated images: one row per code, one column per prompt."""
    from PIL import Image

    n_rows = len(run.code_names)
    n_cols = len(run.prompts)
    H = W = 32
    sheet = np.zeros((n_rows * H, n_cols * W, 3), dtype=np.uint8)
    for r, name in enumerate(run.code_names):
        for c in range(n_cols):
            img = run.images[(name, c)].numpy()
            arr = ((img + 1.0) / 2.0 * 255.0).round().clip(0, 255).astype(np.uint8)
            sheet[r * H:(r + 1) * H, c * W:(c + 1) * W] = arr.transpose(1, 2, 0)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    Image.fromarray(sheet).save(path)
