"""Command-line entry point for the full dataset -> pretrain -> train -> use pipeline."""

from __future__ import annotations

import dataclasses
import json
import os

import click
import numpy as np
import torch
from PIL import Image

from . import config as cfgmod
from .core import RunSeed
from .evalkit import (
    ablation_sweep,
    eval_prompts,
    generate_eval_run,
    sample_codes,
    score_run,
    write_report,
)
from .mapper import AssociationStore
from .toyworld import load_backbone, load_dataset, make_dataset, pretrain_generator, save_backbone
from .toyworld.denoiser import ToyDenoiserConfig
from .toyworld.render import PALETTE_NAMES
from .toyworld.text import default_vocab
from .trainer import generate, load_mapper, train_mapper


@click.group()
def main():
    """Subject-consistent toy generation via latent-code pseudo-words."""


def _load_cfg(path: str | None) -> dict:
    return cfgmod.parse_config(path) if path else dict(cfgmod.DEFAULTS)


@main.command("make-dataset")
@click.option("--identities", default=500, show_default=True)
@click.option("--per-identity", default=4, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
def make_dataset_cmd(identities, per_identity, seed, out):
    """Render the procedural dataset and write it to OUT."""
    summary = make_dataset(identities, per_identity, RunSeed(seed), out)
    click.echo(json.dumps(summary, indent=2))


@main.command("pretrain")
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--steps", default=None, type=int)
@click.option("--seed", default=0, show_default=True)
@click.option("--config", "config_path", default=None, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
def pretrain_cmd(data, steps, seed, config_path, out):
    """Pretrain and freeze the toy text encoder + denoiser backbone."""
    cfg = _load_cfg(config_path)
    examples = load_dataset(data)
    backbone, stats = pretrain_generator(
        examples,
        steps=steps or cfg["pretrain_steps"],
        seed=RunSeed(seed),
        sched=cfgmod.schedule(cfg),
        batch_size=cfg["pretrain_batch"],
        lr=cfg["pretrain_lr"],
        embed_dim=cfg["embed_dim"],
        appearance_prob=cfg["appearance_prob"],
        denoiser_config=ToyDenoiserConfig(base_channels=cfg["denoiser_channels"],
                                          embed_dim=cfg["embed_dim"]),
        verbose=True,
    )
    save_backbone(out, backbone, extra={"stats": stats, "seed": seed,
                                        "config_hash": cfgmod.hash_config(cfg)})
    click.echo(json.dumps(stats, indent=2))


@main.command("train-mapper")
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--backbone", "backbone_path", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", default=None, type=click.Path(exists=True))
@click.option("--steps", default=None, type=int)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
def train_mapper_cmd(data, backbone_path, config_path, steps, seed, out):
    """Train the latent-code-to-pseudo-word mapping network."""
    cfg = _load_cfg(config_path)
    examples = load_dataset(data)
    backbone, _ = load_backbone(backbone_path)
    K = steps or cfg["train_steps"]
    train_mapper(examples, backbone, cfgmod.loss_config(cfg), K, RunSeed(seed),
                 mapper_config=cfgmod.mapper_config(cfg),
                 lr=cfg["lr"], batch_size=cfg["batch_size"],
                 weight_decay=cfg["weight_decay"],
                 out_dir=out, log_path=os.path.join(out, "loss_log.csv"),
                 verbose=True)
    click.echo(f"mapper checkpoint written to {out}")


@main.command("generate")
@click.option("--mapper", "mapper_path", required=True, type=click.Path(exists=True))
@click.option("--backbone", "backbone_path", required=True, type=click.Path(exists=True))
@click.option("--caption", required=True, help='space-separated tokens, e.g. "a person in the park"')
@click.option("--code-name", default=None, help="named code from the association store")
@click.option("--code-seed", default=None, type=int, help="draw a fresh code from this seed")
@click.option("--store", default="codes.json", show_default=True,
              help="association store path (created on demand)")
@click.option("--seed", default=0, show_default=True)
@click.option("--steps", default=20, show_default=True)
@click.option("--out", required=True, type=click.Path())
def generate_cmd(mapper_path, backbone_path, caption, code_name, code_seed, store,
                 seed, steps, out):
    """Generate one image for a caption and a latent code."""
    vocab = default_vocab()
    words = caption.split()
    concept = next((w for w in words if vocab.is_concept(vocab.id_of(w))), None)
    if concept is None:
        raise click.UsageError("caption must contain a concept token (e.g. 'person')")
    tokens = vocab.caption(words, concept=concept)

    mapper, extra = load_mapper(mapper_path)
    backbone, _ = load_backbone(backbone_path)
    code_dim = mapper.config.input_dim

    assoc = AssociationStore(store)
    if code_name and code_name in assoc.names():
        code = assoc.get(code_name)
    elif code_seed is not None:
        code = RunSeed(code_seed).stream("user-code").normal(code_dim)
        if code_name:
            assoc.put(code_name, code)
            assoc.save()
    else:
        raise click.UsageError("provide --code-name (stored) or --code-seed")

    img = generate(mapper, backbone, tokens, code, RunSeed(seed), steps=steps)
    arr = ((img.numpy() + 1.0) / 2.0 * 255.0).round().clip(0, 255).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0)).save(out)
    click.echo(f"wrote {out}")


@main.command("evaluate")
@click.option("--mapper", "mapper_path", required=True, type=click.Path(exists=True))
@click.option("--backbone", "backbone_path", required=True, type=click.Path(exists=True))
@click.option("--codes", default=8, show_default=True)
@click.option("--prompts", "prompts_path", default=None, type=click.Path(exists=True),
              help="JSON list of {caption: [tokens...], context: palette index}")
@click.option("--seed", default=0, show_default=True)
@click.option("--steps", default=20, show_default=True)
@click.option("--report", required=True, type=click.Path())
def evaluate_cmd(mapper_path, backbone_path, codes, prompts_path, seed, steps, report):
    """Score consistency / diversity / fidelity for a trained mapper."""
    mapper, extra = load_mapper(mapper_path)
    backbone, _ = load_backbone(backbone_path)
    run_seed = RunSeed(seed)
    if prompts_path:
        vocab = default_vocab()
        with open(prompts_path) as f:
            raw = json.load(f)
        prompts = []
        for item in raw:
            words = item["caption"] if isinstance(item["caption"], list) else item["caption"].split()
            concept = next(w for w in words if vocab.is_concept(vocab.id_of(w)))
            prompts.append({"caption": vocab.caption(words, concept=concept),
                            "context": int(item["context"])})
    else:
        prompts = eval_prompts()
    code_set = sample_codes(codes, mapper.config.input_dim, run_seed)
    run = generate_eval_run(mapper, backbone, code_set, prompts, run_seed, steps=steps)
    scores = score_run(run)
    write_report(report, scores, extra.get("loss_config", {}).get("hash", ""), run_seed)
    click.echo(json.dumps({k: scores[k] for k in
                           ("consistency", "diversity", "fidelity", "association_margin")},
                          indent=2))


@main.command("ablate")
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--backbone", "backbone_path", required=True, type=click.Path(exists=True))
@click.option("--grid", required=True, type=click.Path(exists=True),
              help="JSON list of config-override dicts (optional 'name' key)")
@click.option("--config", "config_path", default=None, type=click.Path(exists=True))
@click.option("--steps", default=None, type=int)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
def ablate_cmd(data, backbone_path, grid, config_path, steps, seed, out):
    """Train and score one mapper per override config; write a CSV table."""
    cfg = _load_cfg(config_path)
    with open(grid) as f:
        overrides = json.load(f)
    examples = load_dataset(data)
    backbone, _ = load_backbone(backbone_path)
    rows = ablation_sweep(overrides, cfgmod.loss_config(cfg), examples, backbone,
                          RunSeed(seed), K=steps or cfg["train_steps"],
                          lr=cfg["lr"], batch_size=cfg["batch_size"],
                          weight_decay=cfg["weight_decay"],
                          out_csv=out, verbose=True)
    click.echo(f"wrote {out} ({len(rows)} rows)")


if __name__ == "__main__":
    main()
