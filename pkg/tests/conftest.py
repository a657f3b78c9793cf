import numpy as np
import pytest

from flhhe import lhe, ring, tinymlp

MNIST_DIR = "data/mnist"


def toy_params(n=16):
    return ring.RingParams(n=n, q=ring.Q_TOY, t=65537, delta=1024, sigma=3.2, k_max=31)


@pytest.fixture(scope="session")
def params16():
    return toy_params(16)


@pytest.fixture(scope="session")
def params64():
    return toy_params(64)


@pytest.fixture(scope="session")
def params_default():
    return ring.preset("default")


@pytest.fixture(scope="session")
def keys64(params64):
    rng = np.random.default_rng(2024)
    return lhe.keygen(params64, rng)


@pytest.fixture(scope="session")
def keys16(params16):
    rng = np.random.default_rng(2024)
    return lhe.keygen(params16, rng)


@pytest.fixture(scope="session")
def keys_default(params_default):
    rng = np.random.default_rng(2024)
    return lhe.keygen(params_default, rng)


@pytest.fixture(scope="session")
def mnist():
    try:
        return tinymlp.load_mnist(MNIST_DIR)
    except FileNotFoundError:
        pytest.skip(f"MNIST IDX files not found under {MNIST_DIR}")


def synthetic_split(n_samples: int, seed: int = 0) -> tinymlp.DataSplit:
    rng = np.random.default_rng(seed)
    return tinymlp.DataSplit(
        rng.random((n_samples, tinymlp.INPUT_DIM)) * 0.5,
        rng.integers(0, 10, n_samples).astype(np.int64),
    )


@pytest.fixture(scope="session")
def synth_data():
    return synthetic_split(600, seed=10), synthetic_split(240, seed=11)
