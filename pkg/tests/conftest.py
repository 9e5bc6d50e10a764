import numpy as np
import pytest

from facevis.model import generate_synthetic_model


@pytest.fixture(scope="session")
def small_model():
    """Compact model shared by fast tests: 3 identity, 2 expression bases."""
    return generate_synthetic_model(0, q_target=120, n_id=3, n_exp=2)


@pytest.fixture(scope="session")
def default_model():
    """Default-build model: at least 500 vertices, 8 + 4 bases."""
    return generate_synthetic_model(0, q_target=500, n_id=8, n_exp=4)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
