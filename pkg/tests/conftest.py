import numpy as np
import pytest

from bitstorm.toygen import build_toy_cnn, build_toy_prelu_cnn


@pytest.fixture(scope="session")
def toy():
    """The seeded 12-layer toy CNN and its dataset."""
    return build_toy_cnn()


@pytest.fixture(scope="session")
def toy_prelu():
    """The seeded PReLU CNN and its dataset (operation-wise work)."""
    return build_toy_prelu_cnn()


def assert_bits_equal(a, b, msg=""):
    """Bit-exact float32 array comparison (distinguishes -0.0, NaN patterns)."""
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    assert a.shape == b.shape, f"{msg} shape {a.shape} != {b.shape}"
    assert np.array_equal(a.view(np.uint32), b.view(np.uint32)), msg


def assert_values_equal(a, b, msg=""):
    """Value-exact comparison treating NaN==NaN and +0.0 == -0.0."""
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    assert a.shape == b.shape, f"{msg} shape {a.shape} != {b.shape}"
    same = (a == b) | (np.isnan(a) & np.isnan(b))
    assert same.all(), f"{msg} mismatch at {np.argwhere(~same)[:5]}"
