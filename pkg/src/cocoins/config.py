"""Flat key=value experiment configuration with a fixed, typed schema."""

from __future__ import annotations

import dataclasses

from .core import config_hash, make_linear_schedule
from .losses import LossConfig
from .mapper import MappingNetworkConfig

# Every LossConfig field, mapper architecture field, and pipeline knob has a key.
DEFAULTS: dict = {
    # noise schedule
    "schedule_T": 100,
    "alpha_start": 0.9999,
    "alpha_end": 0.01,
    # dimensions
    "embed_dim": 64,
    "code_dim": 64,
    # mapping network
    "mapper_layers": 4,
    "mapper_hidden": 256,
    "mapper_activation": "silu",
    # loss
    "lambda_con": 1.0,
    "lambda_back": 5.0,
    "gamma": 0.05,
    "beta": 2.0,
    "epsilon_div": 1e-4,
    "loss_mode": "contrastive",
    "use_mask": True,
    "use_background": True,
    "neg_form": "reciprocal",
    "neg_schedule": "power",
    "same_prompts": False,
    "same_noise": False,
    # mapper training
    "train_steps": 400,
    "lr": 5e-4,
    "batch_size": 8,
    "weight_decay": 0.3,
    # backbone pretraining
    "pretrain_steps": 6000,
    "pretrain_lr": 2e-3,
    "pretrain_batch": 32,
    "denoiser_channels": 32,
    "appearance_prob": 0.5,
    # sampling
    "sample_steps": 20,
    "guidance_scale": 1.0,
}


def _coerce(key: str, raw: str):
    default = DEFAULTS[key]
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"config key {key!r}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw.strip()


def parse_config(path: str) -> dict:
    """Read key=value lines ('#' comments allowed); unknown keys are errors."""
    cfg = dict(DEFAULTS)
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key not in DEFAULTS:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            cfg[key] = _coerce(key, raw)
    return cfg


def loss_config(cfg: dict) -> LossConfig:
    return LossConfig(
        lambda_con=cfg["lambda_con"],
        lambda_back=cfg["lambda_back"],
        gamma=cfg["gamma"],
        beta=cfg["beta"],
        total_steps=cfg["train_steps"],
        epsilon_div=cfg["epsilon_div"],
        loss_mode=cfg["loss_mode"],
        use_mask=cfg["use_mask"],
        use_background=cfg["use_background"],
        neg_form=cfg["neg_form"],
        neg_schedule=cfg["neg_schedule"],
        same_prompts=cfg["same_prompts"],
        same_noise=cfg["same_noise"],
    )


def mapper_config(cfg: dict) -> MappingNetworkConfig:
    return MappingNetworkConfig(
        n_layers=cfg["mapper_layers"],
        input_dim=cfg["code_dim"],
        hidden_dim=cfg["mapper_hidden"],
        output_dim=cfg["embed_dim"],
        activation=cfg["mapper_activation"],
    )


def schedule(cfg: dict):
    return make_linear_schedule(cfg["schedule_T"], cfg["alpha_start"], cfg["alpha_end"])


def hash_config(cfg: dict) -> str:
    return config_hash(cfg)
