import sys
from pathlib import Path

import numpy as np
import pytest

from bert4xmr.data import encode_rows
from bert4xmr.model import ModelConfig, ParameterSet

sys.path.insert(0, str(Path(__file__).parent))


def randomize(params: ParameterSet, rng: np.random.Generator, std: float = 0.5) -> ParameterSet:
    """Replace every array with O(1) random values so no gradient path is degenerate."""
    for name, arr in params.values.items():
        if name.endswith("gamma"):
            params.values[name] = 1.0 + rng.normal(0.0, 0.3, arr.shape)
        else:
            params.values[name] = rng.normal(0.0, std, arr.shape)
    return params


def random_batch(rng, config: ModelConfig, size: int, max_hist: int | None = None):
    max_hist = config.max_len - 1 if max_hist is None else max_hist
    histories, cands = [], []
    for _ in range(size):
        k = int(rng.integers(1, max_hist + 1))
        histories.append(list(rng.choice(np.arange(1, config.n_items), size=k, replace=False)))
        cands.append(int(rng.integers(1, config.n_items)))
    markets = rng.integers(0, config.n_markets, size=size)
    return encode_rows(histories, cands, markets, config.max_len)


@pytest.fixture
def tiny_config():
    return ModelConfig(n_items=20, n_markets=3, d=8, n_layers=2, n_heads=2, max_len=6, dropout_rate=0.0)


@pytest.fixture
def tiny_params(tiny_config):
    rng = np.random.default_rng(7)
    return randomize(ParameterSet.initialize(tiny_config, rng), rng)


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"{'PASS' if passed else 'FAIL'} criterion {number:>2}: {title} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
