import numpy as np
import pytest

from moa.adapters import LoraExpert
from moa.transformer import ModelConfig, init_base

TINY = ModelConfig(num_layers=2, hidden_dim=8, num_heads=2, ffn_dim=16, vocab_size=32, max_seq_len=16)


def randomize(expert: LoraExpert, rng, std=0.3):
    """Give an expert non-zero B factors so its delta is visible."""
    for key in expert.B:
        expert.A[key].data[...] = rng.normal(0.0, std, expert.A[key].shape)
        expert.B[key].data[...] = rng.normal(0.0, std, expert.B[key].shape)
    return expert


@pytest.fixture
def tiny_base():
    return init_base(TINY, seed=3)


@pytest.fixture
def tiny_base64():
    base = init_base(TINY, seed=3, dtype=np.float64)
    # larger weights make the base outputs non-trivial in gradient checks
    rng = np.random.default_rng(11)
    for name, t in base.params.items():
        if not name.endswith("norm"):
            t.data[...] = rng.normal(0.0, 0.3, t.shape)
    return base


@pytest.fixture
def tokens():
    return np.random.default_rng(7).integers(0, TINY.vocab_size, size=(3, 10))


# acceptance lines are echoed in the terminal summary so they survive output capture
ACCEPTANCE_LINES: list[str] = []


def record_acceptance(n: int, ok: bool, detail: str) -> str:
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
