import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from contlearn.model import Example, ModelConfig


def random_batch(rng, config, n):
    if config.head_kind == "token_labeling":
        out = []
        for _ in range(n):
            k = int(rng.integers(1, 5))
            out.append(Example(rng.normal(size=(k, config.input_dim)),
                               rng.integers(0, config.num_labels, size=k), "t"))
        return out
    return [Example(rng.normal(size=config.input_dim), int(rng.integers(config.num_labels)), "t")
            for _ in range(n)]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_config():
    return ModelConfig(input_dim=6, hidden_dims=(5,), num_labels=4, init_seed=3)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion; shown in the terminal summary."""
    def record(number, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
