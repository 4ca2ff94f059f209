import os

import pytest
import torch

from cocoins.core import RunSeed, make_linear_schedule
from cocoins.toyworld import load_backbone, pretrain_generator, save_backbone
from cocoins.toyworld.denoiser import ToyDenoiserConfig
from cocoins.toyworld.render import render_example, sample_context, sample_identity

CACHE_DIR = os.path.join(os.path.dirname(__file__), ".cache")

# one line per acceptance check, echoed after the run so they are visible
# even with output capture on
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def record_acceptance():
    def check(name: str, ok: bool, detail: str = ""):
        status = "PASS" if ok else "FAIL"
        suffix = f" ({detail})" if detail else ""
        line = f"{name}: {status}{suffix}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line
    return check


@pytest.fixture(scope="session", autouse=True)
def _single_thread():
    # bit-reproducibility contracts are asserted under a fixed thread count
    torch.set_num_threads(max(1, os.cpu_count() // 2))


@pytest.fixture(scope="session")
def run_seed():
    return RunSeed(1234)


@pytest.fixture(scope="session")
def schedule():
    return make_linear_schedule(100, 0.9999, 0.01)


def build_examples(n_identities: int, per_identity: int, seed: RunSeed):
    id_stream = seed.stream("identities")
    ctx_stream = seed.stream("contexts")
    examples = []
    for a in range(n_identities):
        ident = sample_identity(id_stream)
        for b in range(per_identity):
            ctx = sample_context(ctx_stream)
            examples.append(render_example(ident, ctx, seed, f"{a:05d}_{b:02d}"))
    return examples


@pytest.fixture(scope="session")
def tiny_examples(run_seed):
    return build_examples(16, 2, run_seed)


@pytest.fixture(scope="session")
def tiny_backbone(tiny_examples, schedule, run_seed):
    """A briefly pretrained (not converged) frozen backbone for contract tests."""
    ckpt = os.path.join(CACHE_DIR, "tiny_backbone")
    if os.path.exists(os.path.join(ckpt, "manifest.json")):
        backbone, _ = load_backbone(ckpt)
        return backbone
    backbone, _ = pretrain_generator(
        tiny_examples, steps=60, seed=run_seed, sched=schedule,
        batch_size=16, denoiser_config=ToyDenoiserConfig(base_channels=16))
    save_backbone(ckpt, backbone)
    return backbone
