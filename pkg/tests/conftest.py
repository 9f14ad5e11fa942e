import numpy as np
import pytest

from maskcluster import attention


@pytest.fixture(autouse=True)
def _reset_attention_stats():
    attention.stats.reset()
    yield
    attention.stats.reset()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
