from __future__ import annotations

import numpy as np
import pytest

from modules.captioner import DecoderConfig, init_params
from modules.params import ModelParams

TINY_VOCAB = 12
TINY_FEAT_DIM = 6
TINY_REGIONS = 3


def tiny_config(**overrides: int) -> DecoderConfig:
    values = {
        "vocab_size": TINY_VOCAB,
        "feat_dim": TINY_FEAT_DIM,
        "d_model": 8,
        "n_heads": 2,
        "n_layers": 1,
        "ffn_dim": 16,
        "max_len": 6,
    }
    values.update(overrides)
    return DecoderConfig(**values)


def spread_params(cfg: DecoderConfig, seed: int = 0, std: float = 0.5) -> ModelParams:
    """Parameters with larger weights than the training init so outputs are far from uniform."""
    params = init_params(cfg, np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 100)
    for name, tensor in params.items():
        if name.endswith(".w") or name.startswith("embed.word") or name.startswith("embed.pos"):
            tensor.data = rng.normal(0.0, std, size=tensor.shape)
        elif name.endswith(".b"):
            tensor.data = rng.normal(0.0, 0.1, size=tensor.shape)
    return params


@pytest.fixture
def cfg() -> DecoderConfig:
    return tiny_config()


@pytest.fixture
def params(cfg: DecoderConfig) -> ModelParams:
    return spread_params(cfg)


@pytest.fixture
def features() -> np.ndarray:
    return np.random.default_rng(7).normal(size=(TINY_REGIONS, TINY_FEAT_DIM))
