import numpy as np
import pytest


def rel_err(got: np.ndarray, ref: np.ndarray) -> float:
    """Max absolute difference relative to the reference magnitude."""
    got, ref = np.asarray(got), np.asarray(ref)
    denom = max(float(np.max(np.abs(ref))), 1e-300)
    return float(np.max(np.abs(got - ref))) / denom


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
