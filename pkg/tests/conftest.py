import numpy as np
import pytest

from silentspeech import synthdata as sd


@pytest.fixture(scope="session")
def vocab():
    return sd.make_vocab(7, 20)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
