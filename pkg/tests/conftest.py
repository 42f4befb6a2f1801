import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from config import ModelConfig  # noqa: E402
from graphio import SynthConfig, graph_from_adjacency, synth_generate  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run desk-scale benchmark tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale benchmark, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def line_adjacency(n: int) -> np.ndarray:
    a = np.zeros((n, n))
    for i in range(n - 1):
        a[i, i + 1] = a[i + 1, i] = 1.0
    return a


def random_adjacency(rng: np.random.Generator, n: int, p: float = 0.4, symmetric: bool = True) -> np.ndarray:
    a = (rng.random((n, n)) < p) * rng.uniform(0.1, 1.0, (n, n))
    if symmetric:
        a = np.triu(a, 1)
        a = a + a.T
    np.fill_diagonal(a, 0.0)
    return a


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def line_graph():
    return graph_from_adjacency(line_adjacency(4))


@pytest.fixture
def tiny_config():
    return ModelConfig(
        history=12, horizon=3, kernel_size=3, blocks=1, channels=2, num_heads=2, head_dim=2,
        hidden=4, fused_width=4, keep_prob=1.0, horizons=[1, 2, 3], batch_size=4, epochs=2,
        seed=0, val_fraction=0.0, repeats=2,
    )


@pytest.fixture(scope="session")
def tiny_synth():
    config = SynthConfig(nodes=5, steps=120, long_range_pairs=[], period=12, radius=0.6, seed=3, noise=0.05)
    return synth_generate(config)
