"""Shared fixtures: a small synthetic corpus and small networks, all seeded."""

import pytest
import torch

from ivector_gan_pytorch.synthcorpus import CorpusConfig, generate_corpus, make_trials
from ivector_gan_pytorch.gan import GanConfig, build_models
from ivector_gan_pytorch.plda import train_plda


def pytest_addoption(parser):
    parser.addoption('--runslow', action = 'store_true', default = False, help = 'run the long acceptance experiments')


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: long running end-to-end experiment')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return

    skip_slow = pytest.mark.skip(reason = 'needs --runslow')

    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def small_corpus_config():
    return CorpusConfig(
        dim = 8,
        latent_dim = 3,
        num_speakers = 12,
        longs_per_speaker = 2,
        segments_per_long = 4,
        bias_rank = 2,
        eval_speakers = 4,
        seed = 0
    )


@pytest.fixture
def small_corpus(small_corpus_config):
    return generate_corpus(small_corpus_config)


@pytest.fixture
def small_gan_config():
    return GanConfig(
        noise_dim = 4,
        batch_size = 8,
        epochs = 2,
        num_speakers = 8,
        hidden_dim = 16,
        critic_hidden_dim = 16,
        n_critic = 2,
        seed = 0
    )


@pytest.fixture
def small_models(small_gan_config):
    return build_models(8, small_gan_config)


@pytest.fixture
def small_plda(small_corpus):
    vectors, labels = small_corpus.plda_training_data(include_shorts = True)
    return train_plda(vectors, labels, q = 3, iterations = 10)


@pytest.fixture
def short_short_trials(small_corpus):
    return make_trials(small_corpus, 'short-short', 10, 20, seed = 0)


@pytest.fixture
def long_short_trials(small_corpus):
    return make_trials(small_corpus, 'long-short', 10, 20, seed = 0)


@pytest.fixture
def make_unit_batch():
    def _make(count, dim, seed = 0):
        gen = torch.Generator().manual_seed(seed)
        v = torch.randn((count, dim), generator = gen, dtype = torch.float64)
        return v / v.norm(dim = -1, keepdim = True)
    return _make
