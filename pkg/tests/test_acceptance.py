"""End-to-end acceptance suite.

Heavy artifacts (dataset, pretrained backbone, trained mapper variants) are
cached under tests/.cache/accept-* keyed by the settings below; the first run
takes tens of CPU-minutes, later runs reuse the cache.
"""

import json
import math
import os

import numpy as np
import pytest
import torch

from conftest import CACHE_DIR

from cocoins.core import RunSeed, config_hash, module_param_hash
from cocoins.diffusion import ddim_x0, forward_diffuse
from cocoins.evalkit import (
    EvalRun,
    association_margin,
    consistency_score,
    diversity_score,
    eval_prompts,
    fidelity_score,
    generate_eval_run,
    sample_codes,
    score_run,
)
from cocoins.losses import LossConfig, contrastive_loss, neg_weight, total_loss
from cocoins.mapper import (
    MappingNetworkConfig,
    init_mapping_network,
    insert_rows,
    remove_rows,
)
from cocoins.toyworld import load_backbone, load_dataset, make_dataset, pretrain_generator, save_backbone
from cocoins.toyworld.denoiser import ToyDenoiserConfig
from cocoins.toyworld.pretrain import build_backbone
from cocoins.toyworld.render import background_pattern
from cocoins.toyworld.text import default_vocab
from cocoins.trainer import backbone_param_hash, generate, load_mapper, mapper_loss, train_mapper

pytestmark = pytest.mark.slow

# --- fixed acceptance settings (one seed, one configuration) ---------------

SEED = 777
EVAL_SEED = 950
N_IDENTITIES, PER_IDENTITY = 160, 4
PRETRAIN_STEPS = 6000
BASE_CHANNELS = 32
EMBED_DIM = 64
CODE_DIM = 64
K = 400
GAMMA = 0.05
BETA = 2.0
LR = 5e-4
BATCH = 8
WEIGHT_DECAY = 0.3
LAMBDA_BACK = 5.0
EPS_DIV = 1e-4
N_CODES = 8
SAMPLE_STEPS = 20

BASE_LOSS = dict(lambda_con=1.0, lambda_back=LAMBDA_BACK, gamma=GAMMA,
                 beta=BETA, epsilon_div=EPS_DIV, total_steps=K)

VARIANTS = {
    "default": {},
    "pos_only": {"neg_form": "none"},
    "pos_neg_const": {"neg_schedule": "constant"},
    "subtract": {"neg_form": "subtract"},
    "mask_only": {"use_background": False},
    "same_prompts": {"same_prompts": True},
    "same_noise": {"same_noise": True},
}

SETTINGS_KEY = config_hash({
    "seed": SEED, "dataset": [N_IDENTITIES, PER_IDENTITY],
    "pretrain": [PRETRAIN_STEPS, BASE_CHANNELS, EMBED_DIM],
    "train": [K, GAMMA, BETA, LR, BATCH, CODE_DIM, WEIGHT_DECAY],
    "eval": [N_CODES, SAMPLE_STEPS, EVAL_SEED],
    "base_loss": sorted(BASE_LOSS.items()),
})[:12]

ACCEPT_DIR = os.path.join(CACHE_DIR, f"accept-{SETTINGS_KEY}")


def mapper_cfg(d=EMBED_DIM):
    return MappingNetworkConfig(input_dim=CODE_DIM, output_dim=d)


@pytest.fixture(scope="session")
def accept_examples():
    data_dir = os.path.join(ACCEPT_DIR, "data")
    if not os.path.exists(os.path.join(data_dir, "manifest.jsonl")):
        make_dataset(N_IDENTITIES, PER_IDENTITY, RunSeed(SEED), data_dir)
    return load_dataset(data_dir)


@pytest.fixture(scope="session")
def accept_backbone(accept_examples):
    ckpt = os.path.join(ACCEPT_DIR, "backbone")
    if os.path.exists(os.path.join(ckpt, "manifest.json")):
        backbone, _ = load_backbone(ckpt)
        return backbone
    backbone, stats = pretrain_generator(
        accept_examples, steps=PRETRAIN_STEPS, seed=RunSeed(SEED),
        batch_size=32, lr=2e-3, embed_dim=EMBED_DIM,
        denoiser_config=ToyDenoiserConfig(base_channels=BASE_CHANNELS,
                                          embed_dim=EMBED_DIM))
    save_backbone(ckpt, backbone, extra={"stats": stats})
    return backbone


@pytest.fixture(scope="session")
def variant_scores(accept_examples, accept_backbone):
    """Train + evaluate each loss variant at the fixed seed, cached on disk."""
    out = {}
    for name, overrides in VARIANTS.items():
        score_path = os.path.join(ACCEPT_DIR, f"scores_{name}.json")
        if os.path.exists(score_path):
            with open(score_path) as f:
                out[name] = json.load(f)
            continue
        cfg = LossConfig(**dict(BASE_LOSS, **overrides))
        hash_before = backbone_param_hash(accept_backbone)
        mapper, _ = train_mapper(
            accept_examples, accept_backbone, cfg, K, RunSeed(SEED),
            mapper_config=mapper_cfg(accept_backbone.text_encoder.d),
            lr=LR, batch_size=BATCH, weight_decay=WEIGHT_DECAY,
            out_dir=os.path.join(ACCEPT_DIR, f"mapper_{name}"))
        codes = sample_codes(N_CODES, CODE_DIM, RunSeed(EVAL_SEED))
        run = generate_eval_run(mapper, accept_backbone, codes, eval_prompts(),
                                RunSeed(EVAL_SEED), steps=SAMPLE_STEPS)
        scores = {k: v for k, v in score_run(run).items()
                  if isinstance(v, (int, float))}
        scores["backbone_hash_unchanged"] = (
            backbone_param_hash(accept_backbone) == hash_before)
        with open(score_path, "w") as f:
            json.dump(scores, f, indent=2, sort_keys=True)
        out[name] = scores
    return out


# --- 1. algebraic identities ------------------------------------------------

def test_algebraic_identities(record_acceptance, schedule):
    stream = RunSeed(SEED).stream("algebra")
    ok = True
    for _ in range(100):
        x = stream.normal(3, 8, 8)
        eps = stream.normal(3, 8, 8)
        t = int(stream.randint(1, schedule.T + 1).item())
        rec = ddim_x0(forward_diffuse(x, t, eps, schedule), eps, t, schedule)
        ok = ok and bool(torch.allclose(rec, x, atol=1e-5, rtol=1e-5))

    m = stream.normal(6, 4)
    w = stream.normal(4)
    for i in range(7):
        ok = ok and bool(torch.equal(remove_rows(insert_rows(m, w, i), i), m))

    a = stream.normal(3, 8, 8).double()
    b = stream.normal(3, 8, 8).double()
    mask = stream.uniform(8, 8) > 0.5
    from cocoins.losses import masked_distance
    n_in, n_out = int(mask.sum()) * 3, int((~mask).sum()) * 3
    combined = (n_in * masked_distance(a, b, mask)
                + n_out * masked_distance(a, b, ~mask)) / (n_in + n_out)
    ok = ok and abs(float(combined) - float(((a - b) ** 2).mean())) < 1e-12
    record_acceptance("1 algebraic identities (inversion, insert/remove, "
                      "mask partition)", ok)


# --- 2. loss arithmetic -----------------------------------------------------

def test_loss_arithmetic(record_acceptance):
    cfg = LossConfig(epsilon_div=1e-12)
    full = torch.ones(4, 4, dtype=torch.bool)

    def const(mse):
        return torch.full((3, 4, 4), mse ** 0.5, dtype=torch.float64)

    zero = torch.zeros(3, 4, 4, dtype=torch.float64)
    # pull 0.5 apart, push 1/2.0 away at weight 1 -> 1.0
    l_con = contrastive_loss(zero, const(0.5), const(2.0), full, 1.0, cfg)
    ok = abs(float(l_con) - 1.0) < 1e-9
    # weighted sum of the two objective parts
    total = total_loss(torch.tensor(0.4, dtype=torch.float64),
                       torch.tensor(0.2, dtype=torch.float64),
                       LossConfig(lambda_con=2.0, lambda_back=0.5))
    ok = ok and abs(float(total) - 0.9) < 1e-9

    for beta in (0.5, 1.0, 2.0):
        ramp_cfg = LossConfig(gamma=0.7, beta=beta, total_steps=50)
        weights = [neg_weight(k, ramp_cfg) for k in range(51)]
        ok = ok and weights[0] == 0.0
        ok = ok and abs(weights[-1] - 0.7) < 1e-12
        ok = ok and all(b2 >= a2 for a2, b2 in zip(weights, weights[1:]))
    record_acceptance("2 loss arithmetic (hand values, ramp endpoints, "
                      "monotonicity)", ok)


# --- 3. gradient correctness ------------------------------------------------

def test_gradient_matches_finite_differences(record_acceptance, schedule,
                                             tiny_examples, run_seed):
    backbone = build_backbone(
        schedule, embed_dim=16,
        denoiser_config=ToyDenoiserConfig(base_channels=8, embed_dim=16),
        init_seed=run_seed)
    backbone.text_encoder.double()
    backbone.denoiser.double()
    backbone.freeze()
    mapper = init_mapping_network(
        MappingNetworkConfig(input_dim=8, hidden_dim=16, output_dim=16,
                             n_layers=2),
        run_seed, torch.zeros(16))
    g = torch.Generator().manual_seed(0)
    with torch.no_grad():
        for p in mapper.parameters():
            p.add_(0.05 * torch.randn(p.shape, generator=g))
    mapper.double()
    cfg = LossConfig(**dict(BASE_LOSS, total_steps=10))
    batch = tiny_examples[:2]

    def f():
        total, _ = mapper_loss(mapper, backbone, cfg, run_seed, 5, batch)
        return total

    grads = torch.autograd.grad(f(), list(mapper.parameters()))
    flat = torch.cat([gr.reshape(-1) for gr in grads])
    params = list(mapper.parameters())
    h = 1e-5
    worst = 0.0
    for _ in range(10):
        d = torch.randn(flat.shape, generator=g, dtype=torch.float64)
        d /= d.norm()
        analytic = float(flat @ d)

        def shift(sign):
            offset = 0
            with torch.no_grad():
                for p in params:
                    n = p.numel()
                    p.add_(sign * h * d[offset:offset + n].reshape(p.shape))
                    offset += n

        shift(+1.0)
        f_plus = float(f().detach())
        shift(-2.0)
        f_minus = float(f().detach())
        shift(+1.0)
        numeric = (f_plus - f_minus) / (2 * h)
        rel = abs(numeric - analytic) / max(abs(analytic), 1e-12)
        worst = max(worst, rel)
    record_acceptance("3 gradient vs central finite differences",
                      worst < 1e-4, f"worst rel err {worst:.2e}")


# --- 4. freeze and determinism ----------------------------------------------

def test_freeze_and_pipeline_determinism(record_acceptance, tmp_path_factory):
    def pipeline(root):
        data = os.path.join(root, "data")
        make_dataset(8, 2, RunSeed(SEED), data)
        examples = load_dataset(data)
        backbone, _ = pretrain_generator(
            examples, steps=30, seed=RunSeed(SEED), batch_size=8, embed_dim=32,
            denoiser_config=ToyDenoiserConfig(base_channels=8, embed_dim=32))
        hash_before = backbone_param_hash(backbone)
        cfg = LossConfig(**dict(BASE_LOSS, total_steps=500))
        mapper, _ = train_mapper(
            examples, backbone, cfg, 500, RunSeed(SEED),
            mapper_config=MappingNetworkConfig(input_dim=16, hidden_dim=32,
                                               n_layers=2, output_dim=32),
            lr=LR, batch_size=4)
        frozen = backbone_param_hash(backbone) == hash_before
        caption = default_vocab().caption(
            ["a", "calm", "person", "in", "the", "park"], concept="person")
        code = RunSeed(SEED).stream("pipeline-code").normal(16)
        img = generate(mapper, backbone, caption, code, RunSeed(SEED), steps=5)
        return frozen, module_param_hash(mapper), img

    frozen1, mhash1, img1 = pipeline(str(tmp_path_factory.mktemp("pipe1")))
    frozen2, mhash2, img2 = pipeline(str(tmp_path_factory.mktemp("pipe2")))
    ok = frozen1 and frozen2 and mhash1 == mhash2 and bool(torch.equal(img1, img2))
    record_acceptance("4 backbone frozen through 500-step training; "
                      "pipeline rerun bit-identical", ok)


# --- 5. end-to-end association ----------------------------------------------

def test_association_and_fidelity(record_acceptance, variant_scores):
    s = variant_scores["default"]
    ok = s["association_margin"] >= 0.2 and s["fidelity"] >= 0.8
    record_acceptance(
        "5 same-code association margin >= 0.2 and fidelity >= 0.8",
        ok, f"margin {s['association_margin']:.3f}, fidelity {s['fidelity']:.3f}")
    assert s["backbone_hash_unchanged"]


# --- 6. negative term and schedule orderings ---------------------------------

def test_negative_term_orderings(record_acceptance, variant_scores):
    c = {name: variant_scores[name]["consistency"] for name in
         ("pos_only", "pos_neg_const", "default", "subtract")}
    ok = (c["pos_only"] + 0.02 <= c["pos_neg_const"]
          and c["pos_neg_const"] + 0.02 <= c["default"])
    prod = {name: variant_scores[name]["consistency"]
            * variant_scores[name]["diversity"]
            for name in ("default", "subtract")}
    ok = ok and prod["subtract"] <= prod["default"]
    record_acceptance(
        "6 consistency: pos-only < +negative < +schedule; subtract form does "
        "not beat reciprocal",
        ok,
        "consistency " + ", ".join(f"{k}={v:.3f}" for k, v in c.items())
        + f"; c*d default={prod['default']:.3f} subtract={prod['subtract']:.3f}")


# --- 7. background preservation ----------------------------------------------

def test_background_term_orderings(record_acceptance, variant_scores):
    full, mask_only = variant_scores["default"], variant_scores["mask_only"]
    ok = (full["diversity"] >= mask_only["diversity"] + 0.02
          and full["fidelity"] >= mask_only["fidelity"] + 0.02)
    record_acceptance(
        "7 background term raises diversity and fidelity over mask-only",
        ok,
        f"diversity {mask_only['diversity']:.3f}->{full['diversity']:.3f}, "
        f"fidelity {mask_only['fidelity']:.3f}->{full['fidelity']:.3f}")


# --- 8. triplet construction orderings ----------------------------------------

def test_triplet_construction_orderings(record_acceptance, variant_scores):
    c = {name: variant_scores[name]["consistency"] for name in
         ("default", "same_prompts", "same_noise")}
    ok = (c["default"] >= c["same_prompts"] + 0.02
          and c["default"] >= c["same_noise"] + 0.02)
    record_acceptance(
        "8 distinct-prompt/distinct-noise triplets beat same-prompt and "
        "same-noise",
        ok, "consistency " + ", ".join(f"{k}={v:.3f}" for k, v in c.items()))


# --- 9. metric oracles ---------------------------------------------------------

def test_metric_oracles(record_acceptance):
    import itertools

    rng = np.random.default_rng(SEED)
    feats = {}
    for c in "abcd":
        for p in range(5):
            v = rng.normal(size=10) + 1.5
            feats[(c, p)] = v / np.linalg.norm(v)
    run = EvalRun(code_names=list("abcd"), prompts=[{"context": 0}] * 5)
    run.features = feats

    def cos(a, b):
        return float(np.dot(a, b))

    per_code = []
    for c in "abcd":
        fs = [feats[(c, p)] for p in range(5)]
        per_code.append(np.mean([cos(a, b)
                                 for a, b in itertools.combinations(fs, 2)]))
    cents = []
    for c in "abcd":
        m = np.mean([feats[(c, p)] for p in range(5)], axis=0)
        cents.append(m / np.linalg.norm(m))
    div = 1.0 - np.mean([cos(a, b) for a, b in itertools.combinations(cents, 2)])
    ok = (consistency_score(run) == pytest.approx(float(np.mean(per_code)))
          and diversity_score(run) == pytest.approx(float(div)))

    # random palette against random prompt context: accuracy ~ 1/4
    n = 400
    prompts = [{"context": int(p)} for p in rng.integers(0, 4, size=n)]
    mc = EvalRun(code_names=["a"], prompts=prompts)
    for idx in range(n):
        palette = int(rng.integers(0, 4))
        mc.images[("a", idx)] = torch.from_numpy(
            (background_pattern(palette) * 2.0 - 1.0).astype(np.float32))
    baseline = fidelity_score(mc)
    sigma = math.sqrt(0.25 * 0.75 / n)
    ok = ok and abs(baseline - 0.25) <= 3 * sigma
    record_acceptance(
        "9 metric oracles (brute-force match; random-baseline fidelity ~ 1/4)",
        ok, f"baseline {baseline:.3f}")
