import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

_ACCEPTANCE_LINES = []


@pytest.fixture
def report_criterion():
    """Record one PASS/FAIL line; lines are echoed in the terminal summary."""

    def record(number, passed, detail):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_bipartite(rng, n_users, n_items, density=0.3):
    """Random edge list in which every user and every item has an edge."""
    mask = rng.random((n_users, n_items)) < density
    for u in range(n_users):
        mask[u, rng.integers(n_items)] = True
    for i in range(n_items):
        mask[rng.integers(n_users), i] = True
    return np.argwhere(mask).astype(np.int64)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
