# File: src/tests/conftest.py
import os
import tempfile

# Log files go to a scratch directory; settings are read when services import
os.environ.setdefault("LOG_DIR_PATH", tempfile.mkdtemp(prefix="voting-tokenizer-logs-"))

import numpy as np
import pytest

from src.app.models.tokenizer import TokenizerModel
from src.app.schemas.quantizer import QuantizerConfig
from src.app.schemas.signal import CorpusSpec, FeatureConfig
from src.app.schemas.training import ModelConfig
from src.app.services.noise_service import synth_noise_pool
from src.app.services.signal_service import synth_corpus


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run desk-scale experiments")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale experiment, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def feature_config():
    return FeatureConfig(n_bands=8, f_max_hz=4000.0)


@pytest.fixture
def corpus_spec():
    return CorpusSpec(n_utterances=4, alphabet_size=4, segment_frames=4, symbols_per_utterance=3, seed=7)


@pytest.fixture
def corpus(corpus_spec, feature_config):
    return synth_corpus(corpus_spec, feature_config)


@pytest.fixture
def model_config():
    return ModelConfig(
        feature_dim=8,
        encoder_hidden=[8],
        hidden_dim=8,
        pool_factor=2,
        quantizer=QuantizerConfig(n_branches=3, code_dim=4, hidden_dim=8),
        n_classes=4,
    )


@pytest.fixture
def model(model_config, feature_config):
    return TokenizerModel.initialize(model_config, seed=11, feature_config=feature_config)


@pytest.fixture
def noise_pools(tmp_path):
    return synth_noise_pool(tmp_path / "noise", clips_per_family=1, seed=3, duration_s=0.5)
