import dataclasses

import pytest
import torch

from cocoins.core import RunSeed, module_param_hash
from cocoins.losses import LossConfig
from cocoins.mapper import MappingNetworkConfig, init_mapping_network
from cocoins.toyworld.denoiser import ToyDenoiserConfig
from cocoins.toyworld.pretrain import build_backbone
from cocoins.toyworld.text import default_vocab
from cocoins.trainer import (
    backbone_param_hash,
    generate,
    load_mapper,
    mapper_loss,
    train_mapper,
)

GAMMA = 0.1


def small_cfg(**kw):
    base = dict(lambda_con=1.0, lambda_back=1.0, gamma=GAMMA, beta=2.0,
                total_steps=10)
    base.update(kw)
    return LossConfig(**base)


@pytest.fixture(scope="module")
def double_backbone(schedule, run_seed):
    """An untrained double-precision backbone for numerically exact checks."""
    backbone = build_backbone(
        schedule, embed_dim=16,
        denoiser_config=ToyDenoiserConfig(base_channels=8, embed_dim=16),
        init_seed=run_seed)
    backbone.text_encoder.double()
    backbone.denoiser.double()
    backbone.freeze()
    return backbone


def double_mapper(seed, embed_dim=16):
    cfg = MappingNetworkConfig(input_dim=8, hidden_dim=16, output_dim=embed_dim,
                               n_layers=2)
    net = init_mapping_network(cfg, seed, torch.zeros(embed_dim))
    # perturb away from the zero init so gradients are generic
    g = torch.Generator().manual_seed(0)
    with torch.no_grad():
        for p in net.parameters():
            p.add_(0.05 * torch.randn(p.shape, generator=g))
    return net.double()


class TestMapperLoss:
    @pytest.mark.parametrize("cfg_kw", [
        {},
        {"neg_form": "subtract"},
        {"neg_form": "none"},
        {"use_mask": False},
        {"use_background": False},
        {"same_prompts": True},
        {"same_noise": True},
        {"loss_mode": "noise_pred"},
    ])
    def test_all_modes_finite(self, cfg_kw, double_backbone, tiny_examples, run_seed):
        mapper = double_mapper(run_seed)
        total, breakdown = mapper_loss(mapper, double_backbone, small_cfg(**cfg_kw),
                                       run_seed, 5, tiny_examples[:2])
        assert torch.isfinite(total)
        assert breakdown["step"] == 5
        assert breakdown["total"] == pytest.approx(float(total.detach()), rel=1e-6)

    def test_noise_pred_has_no_contrastive_terms(self, double_backbone,
                                                 tiny_examples, run_seed):
        mapper = double_mapper(run_seed)
        _, breakdown = mapper_loss(mapper, double_backbone,
                                   small_cfg(loss_mode="noise_pred"),
                                   run_seed, 0, tiny_examples[:2])
        assert breakdown["lambda_neg"] == 0.0
        assert breakdown["l_back"] == 0.0

    def test_deterministic(self, double_backbone, tiny_examples, run_seed):
        m1, m2 = double_mapper(run_seed), double_mapper(run_seed)
        t1, _ = mapper_loss(m1, double_backbone, small_cfg(), run_seed, 3,
                            tiny_examples[:2])
        t2, _ = mapper_loss(m2, double_backbone, small_cfg(), run_seed, 3,
                            tiny_examples[:2])
        assert float(t1.detach()) == float(t2.detach())

    def test_backbone_receives_no_gradient(self, double_backbone, tiny_examples,
                                           run_seed):
        mapper = double_mapper(run_seed)
        total, _ = mapper_loss(mapper, double_backbone, small_cfg(), run_seed, 5,
                               tiny_examples[:2])
        total.backward()
        assert all(p.grad is None
                   for p in double_backbone.text_encoder.parameters())
        assert all(p.grad is None for p in double_backbone.denoiser.parameters())
        assert any(p.grad is not None and p.grad.abs().sum() > 0
                   for p in mapper.parameters())

    def test_gradient_matches_finite_differences(self, double_backbone,
                                                 tiny_examples, run_seed):
        # directional-derivative check of the full loss in double precision
        mapper = double_mapper(run_seed)
        cfg = small_cfg()
        batch = tiny_examples[:2]

        def f():
            total, _ = mapper_loss(mapper, double_backbone, cfg, run_seed, 5, batch)
            return total

        total = f()
        grads = torch.autograd.grad(total, list(mapper.parameters()))
        flat_grad = torch.cat([g.reshape(-1) for g in grads])

        g = torch.Generator().manual_seed(11)
        h = 1e-6
        params = list(mapper.parameters())
        for _ in range(10):
            direction = torch.randn(flat_grad.shape, generator=g,
                                    dtype=torch.float64)
            direction /= direction.norm()
            analytic = float(flat_grad @ direction)

            def shift(sign):
                offset = 0
                with torch.no_grad():
                    for p in params:
                        n = p.numel()
                        p.add_(sign * h * direction[offset:offset + n].reshape(p.shape))
                        offset += n

            shift(+1.0)
            f_plus = float(f().detach())
            shift(-2.0)
            f_minus = float(f().detach())
            shift(+1.0)
            numeric = (f_plus - f_minus) / (2 * h)
            assert numeric == pytest.approx(analytic, rel=1e-4, abs=1e-8)


class TestTrainMapper:
    def test_short_run_contracts(self, tiny_backbone, tiny_examples, run_seed,
                                 tmp_path):
        before = backbone_param_hash(tiny_backbone)
        mapper, log = train_mapper(
            tiny_examples, tiny_backbone, small_cfg(), K=6, seed=run_seed,
            mapper_config=MappingNetworkConfig(
                input_dim=8, hidden_dim=16, n_layers=2,
                output_dim=tiny_backbone.text_encoder.d),
            batch_size=4, out_dir=str(tmp_path / "ckpt"),
            log_path=str(tmp_path / "log.csv"))
        assert backbone_param_hash(tiny_backbone) == before
        assert len(log) == 6
        # ramp endpoints: zero weight at the first logged step, gamma at the last
        assert log[0]["lambda_neg"] == 0.0
        assert log[-1]["lambda_neg"] == pytest.approx(GAMMA)
        # loss log file has one row per step
        rows = (tmp_path / "log.csv").read_text().strip().splitlines()
        assert len(rows) == 7 and rows[0].startswith("step,")

        reloaded, extra = load_mapper(str(tmp_path / "ckpt"))
        assert module_param_hash(reloaded) == module_param_hash(mapper)
        assert extra["steps"] == 6
        assert extra["loss_config"]["gamma"] == GAMMA

    def test_training_is_seed_deterministic(self, tiny_backbone, tiny_examples):
        mcfg = MappingNetworkConfig(input_dim=8, hidden_dim=16, n_layers=2,
                                    output_dim=tiny_backbone.text_encoder.d)
        kw = dict(K=4, mapper_config=mcfg, batch_size=4)
        m1, _ = train_mapper(tiny_examples, tiny_backbone, small_cfg(),
                             seed=RunSeed(21), **kw)
        m2, _ = train_mapper(tiny_examples, tiny_backbone, small_cfg(),
                             seed=RunSeed(21), **kw)
        m3, _ = train_mapper(tiny_examples, tiny_backbone, small_cfg(),
                             seed=RunSeed(22), **kw)
        assert module_param_hash(m1) == module_param_hash(m2)
        assert module_param_hash(m1) != module_param_hash(m3)

    def test_empty_dataset_rejected(self, tiny_backbone, run_seed):
        with pytest.raises(ValueError):
            train_mapper([], tiny_backbone, small_cfg(), K=1, seed=run_seed)


class TestGenerate:
    @pytest.fixture
    def mapper(self, tiny_backbone, run_seed):
        cfg = MappingNetworkConfig(input_dim=8, hidden_dim=16, n_layers=2,
                                   output_dim=tiny_backbone.text_encoder.d)
        return init_mapping_network(cfg, run_seed,
                                    tiny_backbone.text_encoder.mean_token())

    def caption(self):
        return default_vocab().caption(
            ["a", "calm", "person", "in", "the", "park"], concept="person")

    def test_deterministic_and_code_sensitive(self, mapper, tiny_backbone):
        # break the zero init so different codes map to different pseudo-words
        with torch.no_grad():
            final = [m for m in mapper.net
                     if isinstance(m, torch.nn.Linear)][-1]
            final.weight.copy_(0.5 * torch.randn(final.weight.shape,
                                                 generator=torch.Generator().manual_seed(1)))
        z1, z2 = torch.randn(8), torch.randn(8)
        img_a = generate(mapper, tiny_backbone, self.caption(), z1, RunSeed(1),
                         steps=4)
        img_b = generate(mapper, tiny_backbone, self.caption(), z1, RunSeed(1),
                         steps=4)
        img_c = generate(mapper, tiny_backbone, self.caption(), z2, RunSeed(1),
                         steps=4)
        assert img_a.shape == (3, 32, 32)
        assert torch.equal(img_a, img_b)
        assert not torch.equal(img_a, img_c)

    def test_rejects_caption_without_concept(self, mapper, tiny_backbone):
        vocab = default_vocab()
        cap = vocab.caption(["a", "calm", "person"], concept="person")
        bad = dataclasses.replace(cap, concept_index=0)
        with pytest.raises(ValueError):
            generate(mapper, tiny_backbone, bad, torch.randn(8), RunSeed(0), steps=2)

    def test_guided_generation_runs(self, mapper, tiny_backbone):
        img = generate(mapper, tiny_backbone, self.caption(), torch.randn(8),
                       RunSeed(2), steps=3, guidance_scale=2.0)
        assert torch.isfinite(img).all()
