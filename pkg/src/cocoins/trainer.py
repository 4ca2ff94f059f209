"""Mapper training loop, the noise-prediction baseline mode, and inference."""

from __future__ import annotations

import csv
import dataclasses
import os
from dataclasses import dataclass

import torch

from .core import RunSeed, module_param_hash, save_module, load_module
from .diffusion import ddim_sample, ddim_x0, forward_diffuse
from .losses import (
    LossConfig,
    background_loss,
    combine_contrastive,
    distance,
    masked_sq_dist,
    neg_weight,
    total_loss,
)
from .mapper import (
    MappingNetwork,
    MappingNetworkConfig,
    init_mapping_network,
    insert_rows,
)
from .toyworld.pretrain import Backbone
from .toyworld.render import ToyExample
from .toyworld.text import PromptTokens, default_vocab
from .triplets import sample_training_inputs


@dataclass
class TrainState:
    mapper: MappingNetwork
    optimizer: torch.optim.Optimizer
    k: int
    cfg: LossConfig
    seed: RunSeed
    backbone: Backbone


def _insert_batch(base: torch.Tensor, words: torch.Tensor, positions: list[int]) -> torch.Tensor:
    """Insert words[b] into base[b] at positions[b]; all rows gain length one."""
    return torch.stack([
        insert_rows(base[b], words[b], positions[b]) for b in range(base.shape[0])
    ])


def mapper_loss(mapper: MappingNetwork, backbone: Backbone, cfg: LossConfig,
                seed: RunSeed, k: int, examples: list[ToyExample]):
    """Total training loss at step k for a batch; pure in (params, inputs).

    Returns (total, breakdown). Only the mapping network contributes gradients;
    the unmodulated reference predictions are computed gradient-free.
    """
    sched = backbone.sched
    enc = backbone.text_encoder
    dtype = next(mapper.parameters()).dtype
    code_dim = mapper.config.input_dim

    z1s, z2s, ts, eps1s, eps2s = [], [], [], [], []
    for ex in examples:
        z1, z2, t, eps1, eps2 = sample_training_inputs(ex, seed, k, code_dim, sched)
        if cfg.same_noise:
            eps2 = eps1
        z1s.append(z1)
        z2s.append(z2)
        ts.append(t)
        eps1s.append(eps1)
        eps2s.append(eps2)
    z1 = torch.stack(z1s).to(dtype)
    z2 = torch.stack(z2s).to(dtype)
    t = torch.tensor(ts)
    eps1 = torch.stack(eps1s).to(dtype)
    eps2 = torch.stack(eps2s).to(dtype)
    x = torch.stack([ex.image for ex in examples]).to(dtype)
    masks = torch.stack([ex.mask for ex in examples])

    ids1 = torch.tensor([ex.caption_1.ids for ex in examples])
    pos_i = [ex.caption_1.concept_index for ex in examples]
    if cfg.same_prompts:
        ids2, pos_j = ids1, pos_i
    else:
        ids2 = torch.tensor([ex.caption_2.ids for ex in examples])
        pos_j = [ex.caption_2.concept_index for ex in examples]

    w1 = mapper(z1)
    w2 = mapper(z2)
    emb1 = enc.lookup(ids1).to(dtype)
    emb2 = enc.lookup(ids2).to(dtype)
    cond_a = enc.encode_embedding(_insert_batch(emb1, w1, pos_i))
    cond_p = enc.encode_embedding(_insert_batch(emb2, w1, pos_j))
    cond_n = enc.encode_embedding(_insert_batch(emb1, w2, pos_i))

    # anchor and negative share eps1 by construction
    x_t_a = forward_diffuse(x, t, eps1, sched)
    x_t_p = forward_diffuse(x, t, eps2, sched)

    eps_hat_a = backbone.denoiser.predict(x_t_a, cond_a, t)

    breakdown: dict[str, float] = {"step": k}
    if cfg.loss_mode == "noise_pred":
        total = distance(eps_hat_a, eps1)
        breakdown.update(l_con_pos=float(total.detach()), l_con_neg_raw=0.0,
                         lambda_neg=0.0, l_back=0.0, total=float(total.detach()))
    else:
        eps_hat_p = backbone.denoiser.predict(x_t_p, cond_p, t)
        eps_hat_n = backbone.denoiser.predict(x_t_a, cond_n, t)
        with torch.no_grad():
            cond_u1 = enc.encode_tokens(ids1).to(dtype)
            cond_u2 = enc.encode_tokens(ids2).to(dtype)
            eps_hat_u1 = backbone.denoiser.predict(x_t_a, cond_u1, t)
            eps_hat_u2 = backbone.denoiser.predict(x_t_p, cond_u2, t)

        x0_a = ddim_x0(x_t_a, eps_hat_a, t, sched)
        x0_p = ddim_x0(x_t_p, eps_hat_p, t, sched)
        x0_n = ddim_x0(x_t_a, eps_hat_n, t, sched)
        x0_u1 = ddim_x0(x_t_a, eps_hat_u1, t, sched)
        x0_u2 = ddim_x0(x_t_p, eps_hat_u2, t, sched)

        loss_mask = masks if cfg.use_mask else torch.ones_like(masks)
        lam = neg_weight(min(k, cfg.total_steps), cfg)
        pos, _ = masked_sq_dist(x0_a, x0_p, loss_mask)
        neg, neg_count = masked_sq_dist(x0_a, x0_n, loss_mask)
        l_con = combine_contrastive(pos, neg, neg_count, lam, cfg)
        l_back = background_loss(x0_a, x0_p, x0_n, x0_u1, x0_u2, masks)
        total = total_loss(l_con, l_back, cfg)
        breakdown.update(l_con_pos=float(pos.detach().mean()),
                         l_con_neg_raw=float(neg.detach().mean()),
                         lambda_neg=lam, l_back=float(l_back.detach()),
                         total=float(total.detach()))

    if not torch.isfinite(total):
        bad = [key for key, v in breakdown.items()
               if isinstance(v, float) and not torch.isfinite(torch.tensor(v))]
        raise RuntimeError(f"non-finite loss at step {k}: offending terms {bad}")
    return total, breakdown


def train_step(state: TrainState, examples: list[ToyExample]) -> dict:
    """One optimization step on a batch of examples; only mapper params update."""
    total, breakdown = mapper_loss(state.mapper, state.backbone, state.cfg,
                                   state.seed, state.k, examples)
    state.optimizer.zero_grad()
    total.backward()
    state.optimizer.step()
    state.k += 1
    return breakdown


LOG_COLUMNS = ["step", "l_con_pos", "l_con_neg_raw", "lambda_neg", "l_back", "total"]


def train_mapper(examples: list[ToyExample], backbone: Backbone, cfg: LossConfig,
                 K: int, seed: RunSeed,
                 mapper_config: MappingNetworkConfig | None = None,
                 lr: float = 1e-3, batch_size: int = 8,
                 weight_decay: float = 0.0,
                 out_dir: str | None = None,
                 log_path: str | None = None,
                 verbose: bool = False) -> tuple[MappingNetwork, list[dict]]:
    """Train the mapping network for K steps over the shuffled dataset."""
    if not examples:
        raise ValueError("empty dataset")
    # steps run k = 0..K-1; normalizing the ramp by K-1 makes the logged
    # lambda_neg sequence hit both endpoints: 0 at the first step, gamma at the last
    cfg = dataclasses.replace(cfg, total_steps=max(1, K - 1))
    mcfg = mapper_config or MappingNetworkConfig(
        output_dim=backbone.text_encoder.d)
    mapper = init_mapping_network(mcfg, seed, backbone.text_encoder.mean_token())
    # decoupled weight decay keeps pseudo-word magnitudes near the scale of
    # real token embeddings, where the frozen encoder behaves sensibly
    opt = torch.optim.AdamW(mapper.parameters(), lr=lr, weight_decay=weight_decay)
    state = TrainState(mapper=mapper, optimizer=opt, k=0, cfg=cfg,
                       seed=seed, backbone=backbone)

    backbone_hash_before = backbone_param_hash(backbone)
    order_stream = seed.stream("data-order")
    order = order_stream.permutation(len(examples)).tolist()
    cursor = 0
    log: list[dict] = []
    while state.k < K:
        if cursor + batch_size > len(order):
            order = order_stream.permutation(len(examples)).tolist()
            cursor = 0
        batch = [examples[i] for i in order[cursor:cursor + min(batch_size, len(order))]]
        cursor += batch_size
        row = train_step(state, batch)
        log.append(row)
        if verbose and state.k % 100 == 0:
            print(f"mapper step {state.k}/{K} total {row['total']:.5f}")

    if backbone_param_hash(backbone) != backbone_hash_before:
        raise RuntimeError("backbone parameters changed during mapper training")

    if log_path:
        write_loss_log(log_path, log)
    if out_dir:
        save_module(out_dir, mapper, extra={
            "mapper_config": vars(mcfg),
            "loss_config": dataclasses.asdict(cfg),
            "run_seed": seed.to_json(),
            "steps": K,
        })
    return mapper, log


def write_loss_log(path: str, log: list[dict]):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for row in log:
            writer.writerow({k: row.get(k, "") for k in LOG_COLUMNS})


def load_mapper(ckpt_dir: str) -> tuple[MappingNetwork, dict]:
    from .core import load_checkpoint
    _, manifest = load_checkpoint(ckpt_dir)
    extra = manifest["extra"]
    mapper = MappingNetwork(MappingNetworkConfig(**extra["mapper_config"]))
    load_module(ckpt_dir, mapper)
    mapper.eval()
    return mapper, extra


def backbone_param_hash(backbone: Backbone) -> str:
    return (module_param_hash(backbone.text_encoder)
            + module_param_hash(backbone.denoiser))


def generate(mapper: MappingNetwork, backbone: Backbone, caption: PromptTokens,
             code: torch.Tensor, seed: RunSeed, steps: int = 20,
             guidance_scale: float = 1.0,
             noise_stream: str = "sample-noise",
             image_shape: tuple[int, int, int] = (3, 32, 32)) -> torch.Tensor:
    """Deterministic generation: w = f(z), insert, encode, then DDIM sampling."""
    vocab = default_vocab()
    if not vocab.is_concept(caption.ids[caption.concept_index]):
        raise ValueError("caption has no concept token at its concept_index")
    with torch.no_grad():
        w = mapper(code)
        emb = backbone.text_encoder.lookup(torch.tensor(caption.ids))
        modulated = insert_rows(emb, w, caption.concept_index)
        cond = backbone.text_encoder.encode_embedding(modulated)
        uncond = None
        if guidance_scale != 1.0:
            pad_ids = torch.full((len(caption.ids),), vocab.pad_id)
            uncond = backbone.text_encoder.encode_tokens(pad_ids)
        return ddim_sample(backbone.denoiser, cond, backbone.sched, steps, seed,
                           image_shape, guidance_scale=guidance_scale,
                           uncond_condition=uncond, noise_stream=noise_stream)
