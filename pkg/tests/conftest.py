import numpy as np
import pytest

from ffnprune import toy


@pytest.fixture
def tiny_config():
    return toy.toy_config(vocab_size=32, d_model=8, n_heads=2, n_blocks=2,
                          d_ff=16, max_seq_len=64)


@pytest.fixture
def tiny_model(tiny_config):
    return toy.random_checkpoint(tiny_config, seed=3)


@pytest.fixture
def toy_model():
    return toy.random_checkpoint(seed=7)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
