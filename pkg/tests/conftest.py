import numpy as np
import pytest
import torch

from pretrain_lab import corpusgen, vocab
from pretrain_lab.model import ModelConfig

torch.set_num_threads(2)


@pytest.fixture(scope="session")
def vocab100():
    return vocab.build_vocab(100)


@pytest.fixture(scope="session")
def zipf100(vocab100):
    return vocab.make_distribution("zipf", vocab100, zipf_exponent=1.0)


@pytest.fixture(scope="session")
def uniform100(vocab100):
    return vocab.make_distribution("uniform", vocab100)


@pytest.fixture(scope="session")
def tiny_model_config():
    # small enough for per-test init, big enough to exercise multi-head paths
    return ModelConfig(n_layers=2, hidden_dim=32, n_heads=4, ff_dim=64,
                       vocab_total=64, max_positions=32)


@pytest.fixture(scope="session")
def artificial_corpus_small(zipf100):
    gc = corpusgen.GrammarConfig(push_probability=0.4, dist=zipf100,
                                 length_min=20, length_max=40)
    return corpusgen.generate_artificial(gc, 5_000, seed=31)


def rng(seed=0):
    return np.random.Generator(np.random.PCG64(seed))
