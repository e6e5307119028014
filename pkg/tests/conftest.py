"""Shared fixtures: corpora and models are expensive, so build them once."""

import numpy as np
import pytest

from uwbloc.corpus import ChannelState, CorpusConfig, generate_corpus
from uwbloc.features import extract_all


@pytest.fixture(scope="session")
def default_corpus():
    config = CorpusConfig()
    return generate_corpus(config), config


@pytest.fixture(scope="session")
def default_split(default_corpus):
    records, config = default_corpus
    los = [r for r in records if r.channel_state is ChannelState.LOS]
    nlos = [r for r in records if r.channel_state is ChannelState.NLOS]
    return los, nlos, config


@pytest.fixture(scope="session")
def default_features(default_split):
    los, nlos, config = default_split
    return [extract_all(r) for r in los], [extract_all(r) for r in nlos]


@pytest.fixture(scope="session")
def mini_corpus():
    """Small corpus for harness plumbing tests (big enough for fitted models)."""
    config = CorpusConfig(n_los=30, n_nlos=40, seed=99)
    records = generate_corpus(config)
    los = [r for r in records if r.channel_state is ChannelState.LOS]
    nlos = [r for r in records if r.channel_state is ChannelState.NLOS]
    return los, nlos, config


@pytest.fixture(scope="session")
def nlos_arrays(default_split, default_features):
    _, nlos, _ = default_split
    _, nlos_feats = default_features
    b = np.array([r.true_bias for r in nlos])
    x = np.array([f.reduced for f in nlos_feats])
    return b, x
