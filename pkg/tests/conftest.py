import os
from pathlib import Path

import numpy as np
import pytest

MNIST_DIR = Path(os.environ.get("CSKN_MNIST_DIR", Path(__file__).resolve().parents[1] / "data" / "mnist"))
MNIST_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
               "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")


def mnist_available() -> bool:
    return all((MNIST_DIR / f).is_file() for f in MNIST_FILES)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture(scope="session")
def mnist():
    if not mnist_available():
        pytest.skip(f"MNIST IDX files not found under {MNIST_DIR}")
    from cskn import data as dio
    train = dio.load_idx(MNIST_DIR / MNIST_FILES[0], MNIST_DIR / MNIST_FILES[1])
    test = dio.load_idx(MNIST_DIR / MNIST_FILES[2], MNIST_DIR / MNIST_FILES[3])
    return train, test


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
