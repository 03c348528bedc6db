from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from msgaf.model import ModelConfig, init_params

SMALL_DIMS = {"hidden": 5, "out_dim": 4, "scene_hidden": 4, "scene_dim": 3, "expert_hidden": 4, "n_experts": 4}


def random_dag(n: int, rng: np.random.Generator, p: float = 0.4) -> np.ndarray:
    A = np.triu((rng.random((n, n)) < p).astype(float), k=1)
    for j in range(1, n):
        if not A[:j, j].any():
            A[rng.integers(0, j), j] = 1.0
    return A


def random_instance(n: int, rng: np.random.Generator, batch: int | None = None):
    shape = (n, 9) if batch is None else (batch, n, 9)
    return rng.normal(size=shape), random_dag(n, rng)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_config():
    return ModelConfig(n_nodes=6, **SMALL_DIMS)


@pytest.fixture
def small_params(small_config):
    return init_params(small_config, np.random.default_rng(7))
