"""Backbone container and noise-prediction pretraining of the frozen generator."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch

from ..core import NoiseSchedule, RunSeed, make_linear_schedule, save_checkpoint, load_checkpoint
from ..diffusion import forward_diffuse
from .denoiser import ToyDenoiser, ToyDenoiserConfig
from .render import GLYPHS, ToyExample, ToyIdentity, background_pattern
from .text import TextEncoder, default_vocab


@dataclass
class Backbone:
    """Frozen generator: text encoder + denoiser + their shared noise schedule."""

    text_encoder: TextEncoder
    denoiser: ToyDenoiser
    sched: NoiseSchedule

    def freeze(self):
        for module in (self.text_encoder, self.denoiser):
            module.eval()
            for p in module.parameters():
                p.requires_grad_(False)

    def encode_tokens(self, ids: torch.Tensor) -> torch.Tensor:
        return self.text_encoder.encode_tokens(ids)


def build_backbone(sched: NoiseSchedule, embed_dim: int = 64,
                   denoiser_config: ToyDenoiserConfig | None = None,
                   init_seed: RunSeed | None = None) -> Backbone:
    if init_seed is not None:
        torch.manual_seed(init_seed.seed)
    vocab = default_vocab()
    enc = TextEncoder(len(vocab), d=embed_dim)
    cfg = denoiser_config or ToyDenoiserConfig(embed_dim=embed_dim)
    return Backbone(text_encoder=enc, denoiser=ToyDenoiser(cfg), sched=sched)


def save_backbone(out_dir: str, backbone: Backbone, extra: dict | None = None):
    arrays = {}
    for prefix, module in (("text_encoder", backbone.text_encoder),
                           ("denoiser", backbone.denoiser)):
        for k, v in module.state_dict().items():
            arrays[f"{prefix}.{k}"] = v.detach().cpu().numpy()
    meta = dict(extra or {})
    meta["alphas"] = backbone.sched.alphas.tolist()
    meta["embed_dim"] = backbone.text_encoder.d
    meta["denoiser_config"] = vars(backbone.denoiser.config)
    save_checkpoint(out_dir, arrays, extra=meta)


def load_backbone(ckpt_dir: str) -> tuple[Backbone, dict]:
    arrays, manifest = load_checkpoint(ckpt_dir)
    extra = manifest["extra"]
    sched = NoiseSchedule(torch.tensor(extra["alphas"], dtype=torch.float64))
    dcfg = ToyDenoiserConfig(**extra["denoiser_config"])
    backbone = build_backbone(sched, embed_dim=extra["embed_dim"], denoiser_config=dcfg)
    for prefix, module in (("text_encoder", backbone.text_encoder),
                           ("denoiser", backbone.denoiser)):
        state = {
            k[len(prefix) + 1:]: torch.from_numpy(v)
            for k, v in arrays.items() if k.startswith(prefix + ".")
        }
        module.load_state_dict(state)
    backbone.freeze()
    return backbone, extra


_APPEARANCE_PROJ_SEED = 613


@lru_cache(maxsize=None)
def _appearance_projection(d: int) -> torch.Tensor:
    g = torch.Generator().manual_seed(_APPEARANCE_PROJ_SEED)
    return torch.randn(d, 14, generator=g) / math.sqrt(14)


def appearance_token(identity: ToyIdentity, d: int) -> torch.Tensor:
    """Deterministic appearance embedding of an identity at real-token scale.

    A fixed projection of the identity parameters into the token-embedding
    space. Inserting it before the concept token during pretraining teaches
    the denoiser to decode subject appearance from a continuous token, while
    the discrete captions stay free of identity attributes.
    """
    two_pi = 2.0 * math.pi
    feats = torch.tensor([
        math.cos(two_pi * identity.hue), math.sin(two_pi * identity.hue),
        math.cos(two_pi * identity.secondary_hue),
        math.sin(two_pi * identity.secondary_hue),
        *[1.0 if s == identity.shape else 0.0 for s in GLYPHS],
        (identity.size - 0.3) / 0.1,
        *[1.0 if k == identity.stripe_freq else 0.0 for k in range(5)],
    ])
    v = _appearance_projection(d) @ feats
    return v / v.norm() * math.sqrt(d)


def _caption_without_subject(example: ToyExample, vocab) -> torch.Tensor:
    """Replace the concept token with a filler so the caption names no subject."""
    ids = list(example.caption_1.ids)
    ids[example.caption_1.concept_index] = vocab.id_of("view")
    return torch.tensor(ids)


def pretrain_generator(examples: list[ToyExample], steps: int, seed: RunSeed,
                       sched: NoiseSchedule | None = None,
                       batch_size: int = 32, lr: float = 2e-3,
                       embed_dim: int = 64,
                       subject_dropout: float = 0.15,
                       appearance_prob: float = 0.5,
                       val_fraction: float = 0.1,
                       denoiser_config: ToyDenoiserConfig | None = None,
                       log_every: int = 200,
                       verbose: bool = False) -> tuple[Backbone, dict]:
    """Standard noise-prediction training; returns the frozen backbone and stats.

    A small fraction of samples drop the subject (background-only image, caption
    without the concept token) so concept-token presence stays causally tied to
    a glyph appearing.
    """
    if not examples:
        raise ValueError("empty dataset")
    sched = sched or make_linear_schedule(100, 0.9999, 0.01)
    vocab = default_vocab()
    backbone = build_backbone(sched, embed_dim=embed_dim,
                              denoiser_config=denoiser_config, init_seed=seed)
    params = list(backbone.text_encoder.parameters()) + list(backbone.denoiser.parameters())
    opt = torch.optim.Adam(params, lr=lr)

    n_val = max(1, int(len(examples) * val_fraction))
    train_set, val_set = examples[:-n_val], examples[-n_val:]
    bg_only = {
        p: torch.from_numpy((background_pattern(p) * 2.0 - 1.0).astype(np.float32))
        for p in range(4)
    }

    stream = seed.stream("pretrain")

    def batch_loss(batch: list[ToyExample], step: int, train: bool) -> torch.Tensor:
        pick = stream.uniform(len(batch))
        drop = stream.uniform(len(batch))
        appd = stream.uniform(len(batch))
        t_draw = stream.randint(1, sched.T + 1, len(batch))
        imgs, ts = [], []
        plain_rows: list[tuple[int, torch.Tensor]] = []
        app_rows: list[tuple[int, torch.Tensor, int, ToyIdentity]] = []
        for b, ex in enumerate(batch):
            if train and float(drop[b]) < subject_dropout:
                imgs.append(bg_only[ex.context.palette])
                plain_rows.append((b, _caption_without_subject(ex, vocab)))
            else:
                imgs.append(ex.image)
                cap = ex.caption_1 if float(pick[b]) < 0.5 else ex.caption_2
                ids = torch.tensor(cap.ids)
                if train and float(appd[b]) < appearance_prob:
                    app_rows.append((b, ids, cap.concept_index, ex.identity))
                else:
                    plain_rows.append((b, ids))
            ts.append(int(t_draw[b]))
        x = torch.stack(imgs)
        eps = stream.normal(*x.shape)
        t = torch.tensor(ts)
        x_t = forward_diffuse(x, t, eps, sched)
        enc = backbone.text_encoder
        sq_err = []
        if plain_rows:
            idx = [b for b, _ in plain_rows]
            cond = backbone.encode_tokens(torch.stack([r for _, r in plain_rows]))
            eps_hat = backbone.denoiser.predict(x_t[idx], cond, t[idx])
            sq_err.append(((eps_hat - eps[idx]) ** 2).reshape(len(idx), -1))
        if app_rows:
            # insert the appearance embedding before the concept token, the
            # same slot a learned pseudo-word occupies downstream
            idx = [b for b, *_ in app_rows]
            modded = []
            for _, ids, pos, ident in app_rows:
                emb = enc.lookup(ids)
                tok = appearance_token(ident, enc.d).to(emb.dtype)
                modded.append(torch.cat([emb[:pos], tok[None], emb[pos:]]))
            cond = enc.encode_embedding(torch.stack(modded))
            eps_hat = backbone.denoiser.predict(x_t[idx], cond, t[idx])
            sq_err.append(((eps_hat - eps[idx]) ** 2).reshape(len(idx), -1))
        return torch.cat(sq_err).mean()

    def val_loss() -> float:
        with torch.no_grad():
            total, count = 0.0, 0
            for k in range(0, len(val_set), batch_size):
                batch = val_set[k:k + batch_size]
                total += float(batch_loss(batch, -1, train=False)) * len(batch)
                count += len(batch)
        return total / count

    stats = {"val_loss_init": val_loss()}
    losses = []
    order_stream = seed.stream("pretrain-order")
    order = order_stream.permutation(len(train_set)).tolist()
    cursor = 0
    for step in range(steps):
        if cursor + batch_size > len(order):
            order = order_stream.permutation(len(train_set)).tolist()
            cursor = 0
        batch = [train_set[i] for i in order[cursor:cursor + batch_size]]
        cursor += batch_size
        loss = batch_loss(batch, step, train=True)
        if not torch.isfinite(loss):
            raise RuntimeError(f"pretraining diverged at step {step}: loss={loss}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
        if verbose and (step + 1) % log_every == 0:
            print(f"pretrain step {step + 1}/{steps} loss {np.mean(losses[-log_every:]):.4f}")

    stats["val_loss_final"] = val_loss()
    stats["train_loss_first"] = float(np.mean(losses[:max(1, steps // 10)]))
    stats["train_loss_last"] = float(np.mean(losses[-max(1, steps // 10):]))
    backbone.freeze()
    return backbone, stats
