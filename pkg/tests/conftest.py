import math

import numpy as np
import pytest

from credit_lens.engine import enumerate_trajectories
from credit_lens.mdp import random_mdp, random_policy

FAMILY_SEED = 2024
FAMILY_SIZE = 100


def random_family(n=FAMILY_SIZE, seed=FAMILY_SEED):
    """``n`` random small MDPs (S<=4, A<=3, H<=4) with a random or uniform policy each."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        m = random_mdp(rng)
        pol = random_policy(rng, m) if i % 2 else "uniform"
        out.append((m, pol))
    return out


@pytest.fixture(scope="session")
def family():
    return random_family()


@pytest.fixture(scope="session")
def family_tables(family):
    return [enumerate_trajectories(m, p) for m, p in family]


@pytest.fixture
def ln2():
    return math.log(2.0)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
