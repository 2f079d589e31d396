import pytest
import torch

from kelab.corpus import generate_fact_graph
from kelab.model import ModelConfig, init_model

torch.set_num_threads(1)


def micro_config(**kw) -> ModelConfig:
    base = dict(n_layers=2, d_model=8, d_mlp=16, n_heads=2, vocab_size=12, max_seq_len=16, seed=0)
    base.update(kw)
    return ModelConfig(**base)


def randomized(model, scale=0.5, seed=1):
    """Same shapes, larger random weights so tests are not dominated by tiny init values."""
    gen = torch.Generator().manual_seed(seed)
    return model.with_params({k: torch.randn(v.shape, generator=gen, dtype=v.dtype) * scale
                              for k, v in model.params.items()})


@pytest.fixture
def micro():
    return randomized(init_model(micro_config()))


@pytest.fixture(scope="session")
def small_graph():
    return generate_fact_graph(12, 3, 8, seed=3, n_context=4)


# acceptance criteria report their verdicts here; printed in the terminal summary
ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = f"CRITERION {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
