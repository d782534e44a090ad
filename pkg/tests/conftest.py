import numpy as np
import pytest
from hypothesis import settings

from ctkd.autodiff import default_dtype

settings.register_profile("ctkd", deadline=None, max_examples=25, derandomize=True)
settings.load_profile("ctkd")


@pytest.fixture
def f64():
    with default_dtype(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
