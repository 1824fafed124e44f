import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture
def rng64():
    """Generator for float64 oracle tests (separate stream from rng)."""
    return np.random.default_rng(907)
