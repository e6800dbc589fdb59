import os
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from twinnet.config import DATA_ENV  # noqa: E402

ACCEPTANCE_LINES: list[str] = []


def data_root() -> Path:
    return Path(os.environ.get(DATA_ENV, "~/data")).expanduser()


@pytest.fixture(scope="session")
def mnist_root():
    root = data_root() / "mnist"
    if not (root / "train-images-idx3-ubyte").exists() and not (root / "train-images-idx3-ubyte.gz").exists():
        pytest.skip(f"MNIST not found under {root}; run scripts/fetch_data.py")
    return root


@pytest.fixture(scope="session")
def text_path():
    p = data_root() / "text" / "kjv.txt"
    if not p.exists():
        pytest.skip(f"{p} not found; run scripts/fetch_data.py")
    return p


@pytest.fixture
def report():
    """Record one acceptance line; all lines are echoed in the terminal summary."""
    def add(criterion: str, passed: bool, detail: str):
        line = f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed
    return add


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
