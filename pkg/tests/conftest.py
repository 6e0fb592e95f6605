import os

import numpy as np
import pytest

from weightpress import mnist

DATA_DIR = os.path.join(os.path.dirname(__file__), "..", "data", "mnist")

TRAIN_IMAGES = os.path.join(DATA_DIR, "train-images-idx3-ubyte.gz")
TRAIN_LABELS = os.path.join(DATA_DIR, "train-labels-idx1-ubyte.gz")
TEST_IMAGES = os.path.join(DATA_DIR, "t10k-images-idx3-ubyte.gz")
TEST_LABELS = os.path.join(DATA_DIR, "t10k-labels-idx1-ubyte.gz")


@pytest.fixture(scope="session")
def mnist_train():
    return mnist.load_mnist_idx(TRAIN_IMAGES, TRAIN_LABELS)


@pytest.fixture(scope="session")
def mnist_test():
    return mnist.load_mnist_idx(TEST_IMAGES, TEST_LABELS)


def toy_separable(n_per_class: int = 10, seed: int = 0) -> mnist.Dataset:
    """Two linearly separable 2-D blobs, labels 0 and 1."""
    rng = np.random.default_rng(seed)
    a = rng.normal(loc=(-1.5, -1.5), scale=0.3, size=(n_per_class, 2))
    b = rng.normal(loc=(1.5, 1.5), scale=0.3, size=(n_per_class, 2))
    samples = np.concatenate([a, b]).astype(np.float32)
    labels = np.concatenate([np.zeros(n_per_class), np.ones(n_per_class)]).astype(np.int64)
    return mnist.Dataset(samples, labels)
