import numpy as np
import pytest

from gap_priors.datagen import GroupedDataset
from gap_priors.model import MlpSpec

# criterion lines collected by the acceptance module, echoed in the summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def toy_dataset(n=200, d=3, seed=0, tag="train", n_attributes=2):
    r = np.random.default_rng(seed)
    y = r.integers(0, 2, n)
    a = r.integers(0, n_attributes, n)
    x = r.standard_normal((n, d)) + (2 * y - 1)[:, None]
    return GroupedDataset(x, y, a, 2, n_attributes, tag)


@pytest.fixture
def small_spec():
    return MlpSpec((3, 5, 2), "tanh")
