import numpy as np
import pytest
from hypothesis import settings

from bartlab.data import synth_george

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def george():
    return synth_george(1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
