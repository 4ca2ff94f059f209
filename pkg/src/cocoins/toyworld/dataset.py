"""Dataset directory IO: PNG images/masks plus a JSONL manifest."""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np
import torch
from PIL import Image

from ..core import RunSeed
from .render import (
    ToyContext,
    ToyExample,
    ToyIdentity,
    render_example,
    sample_context,
    sample_identity,
)
from .text import PromptTokens


def _image_to_png(image: torch.Tensor) -> Image.Image:
    arr = ((image.numpy() + 1.0) / 2.0 * 255.0).round().clip(0, 255).astype(np.uint8)
    return Image.fromarray(arr.transpose(1, 2, 0), mode="RGB")


def _png_to_image(path: str) -> torch.Tensor:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
    return torch.from_numpy((arr / 255.0 * 2.0 - 1.0).transpose(2, 0, 1).copy())


def save_dataset(examples: list[ToyExample], out_dir: str) -> dict:
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    records = []
    for ex in sorted(examples, key=lambda e: e.id):
        image_path = f"images/{ex.id}.png"
        mask_path = f"masks/{ex.id}.png"
        _image_to_png(ex.image).save(os.path.join(out_dir, image_path))
        Image.fromarray(ex.mask.numpy()).convert("1").save(os.path.join(out_dir, mask_path))
        records.append({
            "id": ex.id,
            "identity_params": ex.identity.to_json(),
            "context_params": ex.context.to_json(),
            "caption_1": list(ex.caption_1.ids),
            "caption_2": list(ex.caption_2.ids),
            "i": ex.caption_1.concept_index,
            "j": ex.caption_2.concept_index,
            "image_path": image_path,
            "mask_path": mask_path,
        })
    lines = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
    with open(os.path.join(out_dir, "manifest.jsonl"), "w") as f:
        f.write(lines)
    return {
        "n_examples": len(records),
        "n_captions": 2 * len(records),
        "manifest_hash": hashlib.sha256(lines.encode()).hexdigest(),
    }


def make_dataset(n_identities: int, images_per_identity: int, seed: RunSeed,
                 out_dir: str) -> dict:
    """Render a full dataset of glyph subjects in varying contexts and write it out."""
    if n_identities < 1 or images_per_identity < 1:
        raise ValueError("dataset sizes must be >= 1")
    id_stream = seed.stream("identities")
    ctx_stream = seed.stream("contexts")
    identities: list[ToyIdentity] = []
    seen = set()
    while len(identities) < n_identities:
        ident = sample_identity(id_stream)
        key = (round(ident.hue, 6), round(ident.secondary_hue, 6), ident.shape,
               round(ident.size, 6), ident.stripe_freq)
        if key in seen:
            continue
        seen.add(key)
        identities.append(ident)
    examples = []
    for a, ident in enumerate(identities):
        for b in range(images_per_identity):
            ex_id = f"{a:05d}_{b:02d}"
            ctx = sample_context(ctx_stream)
            examples.append(render_example(ident, ctx, seed, example_id=ex_id))
    summary = save_dataset(examples, out_dir)
    summary.update({"n_identities": n_identities,
                    "images_per_identity": images_per_identity})
    return summary


def load_dataset(data_dir: str) -> list[ToyExample]:
    examples = []
    with open(os.path.join(data_dir, "manifest.jsonl")) as f:
        for line in f:
            r = json.loads(line)
            image = _png_to_image(os.path.join(data_dir, r["image_path"]))
            mask_arr = np.asarray(
                Image.open(os.path.join(data_dir, r["mask_path"])).convert("1"))
            examples.append(ToyExample(
                id=r["id"],
                image=image,
                caption_1=PromptTokens(tuple(r["caption_1"]), r["i"]),
                caption_2=PromptTokens(tuple(r["caption_2"]), r["j"]),
                mask=torch.from_numpy(mask_arr.copy()),
                identity=ToyIdentity.from_json(r["identity_params"]),
                context=ToyContext.from_json(r["context_params"]),
            ))
    return sorted(examples, key=lambda e: e.id)
