import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from colld.data import SyntheticCorpus
from colld.encoder import EncoderConfig, build_encoder, preset

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

SMALL = EncoderConfig(layers=3, dim=16, ffn=32, heads=2, conv_kernel=5, input_dim=12)


@pytest.fixture
def small_encoder():
    return build_encoder(SMALL, seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_corpus():
    return SyntheticCorpus(num_utterances=8, min_frames=60, max_frames=90, seed=3)


@pytest.fixture(scope="session")
def tiny_pair():
    return build_encoder(preset("tiny"), seed=11), build_encoder(preset("tiny", layers=2), seed=12)


ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


@pytest.fixture(scope="session")
def acceptance_log(request):
    return request.config.stash[ACCEPTANCE]


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
