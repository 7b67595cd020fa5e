import numpy as np
import pytest

from resattunet.data import synth_dataset
from resattunet.tensor import precision

ACCEPTANCE_LINES = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    with precision(np.float64):
        yield


@pytest.fixture
def tiny_dataset(tmp_path):
    """4 noise-free 32x32 patches, 4 classes, 4 bands, all in the train split."""
    return synth_dataset(tmp_path / "tiny", seed=3, n_patches=4, size=32, num_classes=4, bands=4)


@pytest.fixture
def split_dataset(tmp_path):
    return synth_dataset(
        tmp_path / "split", seed=5, n_patches=6, size=16, num_classes=3, bands=3,
        noise=0.05, val_fraction=1 / 3, test_fraction=1 / 6,
    )


@pytest.fixture
def acceptance_line():
    def emit(number, title, ok, detail=""):
        line = f"criterion {number:>2} [{'PASS' if ok else 'FAIL'}] {title}" + (f" :: {detail}" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
