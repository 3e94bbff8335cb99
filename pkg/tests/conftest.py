from pathlib import Path

import numpy as np
import pytest

from facemotor.blendshape_rig import build_default_rig
from facemotor.emotion_decoder import EmotionDecoder, SyntheticCorpus
from facemotor.face_oracle import OracleConfig, build_oracle
from facemotor.self_model import SelfModel, generate_dataset

DATA = Path(__file__).parent / "data"

# (content, emotion) cells never used in decoder training; they are the
# validation split of the default synthetic corpus
DECODER_HOLDOUT = ((0, 2), (3, 1))


@pytest.fixture(scope="session")
def oracle():
    return build_oracle(42)


@pytest.fixture(scope="session")
def linear_oracle():
    return build_oracle(42, OracleConfig.linear())


@pytest.fixture(scope="session")
def rig(oracle):
    return build_default_rig(oracle)


@pytest.fixture(scope="session")
def dataset(oracle):
    return generate_dataset(oracle, 5000, 7)


@pytest.fixture(scope="session")
def linear_dataset(linear_oracle):
    return generate_dataset(linear_oracle, 5000, 7)


def fit_self_model(data, **params):
    return SelfModel(**params).fit(data.motors, data.landmarks, data.region_mask, data.motor_groups)


@pytest.fixture(scope="session")
def trained_model(dataset):
    """Default-budget self-model of the nonlinear oracle."""
    return fit_self_model(dataset)


@pytest.fixture(scope="session")
def linear_model(linear_dataset):
    return fit_self_model(linear_dataset)


@pytest.fixture(scope="session")
def small_model(dataset):
    """Cheap model for tests that only need some fitted network."""
    return fit_self_model(dataset, hidden=(16,), epochs=2)


@pytest.fixture(scope="session")
def corpus_gen():
    return SyntheticCorpus(0)


@pytest.fixture(scope="session")
def corpus(corpus_gen):
    return corpus_gen.samples()


@pytest.fixture(scope="session")
def trained_decoder(corpus):
    return EmotionDecoder(holdout=DECODER_HOLDOUT).fit(corpus)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
