"""Shared fixtures.

Real MNIST IDX files are used when ``MCSPREAD_MNIST_DIR`` points at a
directory holding the four standard files. Otherwise the 5000-image MNIST
subset bundled with mlxtend is written out as IDX files and loaded through
the same parser, split 4000 train / 1000 test.
"""
import os
from pathlib import Path

import numpy as np
import pytest

from mcspread.data_io import load_idx, write_idx

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def real_mnist_dir():
    d = os.environ.get("MCSPREAD_MNIST_DIR")
    if d and all((Path(d) / f).exists() for pair in MNIST_FILES.values() for f in pair):
        return Path(d)
    return None


@pytest.fixture(scope="session")
def mnist_idx_dir(tmp_path_factory):
    real = real_mnist_dir()
    if real is not None:
        return real, "MNIST (full IDX)"
    mlxtend_data = pytest.importorskip("mlxtend.data")
    X, y = mlxtend_data.mnist_data()
    order = np.random.default_rng(0).permutation(len(X))
    out = tmp_path_factory.mktemp("mnist")
    for part, idx in (("train", order[:4000]), ("test", order[4000:])):
        imgs, labs = MNIST_FILES[part]
        write_idx(out / imgs, out / labs, X[idx].reshape(-1, 28, 28).astype(np.uint8), y[idx])
    return out, "MNIST 5000-image subset (mlxtend)"


@pytest.fixture(scope="session")
def mnist(mnist_idx_dir):
    d, source = mnist_idx_dir
    train = load_idx(d / MNIST_FILES["train"][0], d / MNIST_FILES["train"][1])
    test = load_idx(d / MNIST_FILES["test"][0], d / MNIST_FILES["test"][1])
    return train, test, source


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
