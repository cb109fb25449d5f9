"""Shared fixtures: a small synthetic corpus and a model converged on it."""

import pytest

from logsentinel.corpus import build_split
from logsentinel.evaluation import SyntheticSpec, deterministic_chain_grammar, generate_synthetic
from logsentinel.model import GptModel, ModelConfig
from logsentinel.training import TrainConfig, pretrain

SMALL_MODEL = dict(n_layers=2, n_heads=2, d_model=16, max_len=64, dropout=0.0)


@pytest.fixture(scope="session")
def det_grammar():
    return deterministic_chain_grammar(n_keys=12, continue_prob=0.85)


@pytest.fixture(scope="session")
def det_split(det_grammar):
    spec = SyntheticSpec(det_grammar, n_normal=260, n_anomalous=30, seed=11)
    return build_split(generate_synthetic(spec), n_train=200, seed=7)


@pytest.fixture(scope="session")
def det_model(det_split):
    config = ModelConfig(vocab_size=det_split.vocab.size, **SMALL_MODEL)
    model = GptModel(config, seed=5)
    pretrain(model, det_split.train, TrainConfig(lr=3e-3, batch_size=16, epochs=10, seed=5))
    return model
