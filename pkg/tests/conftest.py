import numpy as np
import pytest
import torch

from cotformer.config import ModelConfig
from cotformer.model import init_params

torch.set_num_threads(1)


def random_params(config: ModelConfig, seed: int = 0, dtype=torch.float32, std: float = 0.3):
    """Parameters with every tensor (LN gains, router vectors included) randomised."""
    gen = torch.Generator().manual_seed(seed)
    params = init_params(config, seed=seed, dtype=torch.float64)
    out = {}
    for name, p in params.items():
        noise = torch.randn(p.shape, generator=gen, dtype=torch.float64) * std
        if name.endswith(".weight"):
            out[name] = (1.0 + noise).to(dtype)
        else:
            out[name] = noise.to(dtype)
    return out


def random_ids(config: ModelConfig, seq_len: int, seed: int = 0, batch: int | None = None):
    rng = np.random.default_rng(seed)
    shape = (seq_len,) if batch is None else (batch, seq_len)
    return rng.integers(0, config.vocab_size, size=shape)


def tiny(**kw) -> ModelConfig:
    base = dict(n_middle=2, n_repeat=3, d_model=16, n_heads=2, vocab_size=32, max_seq_len=16)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance summary -------------------------------------------------------

ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n} [{name}]: {'PASS' if ok else 'FAIL'}  {detail}")
