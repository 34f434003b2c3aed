import numpy as np
import pytest
import torch

from shapediff.geometry import Molecule
from shapediff.schedule import Schedule


@pytest.fixture(scope="session")
def schedule():
    return Schedule.build(1000)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_molecule(seed=0, n=6):
    rng = np.random.default_rng(seed)
    pos = np.cumsum(rng.normal(scale=1.0, size=(n, 3)), axis=0)
    return Molecule(pos, rng.integers(0, 10, size=n))


@pytest.fixture
def molecule():
    return random_molecule()


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[2])):
            terminalreporter.write_line(line)
