import numpy as np
import pytest

from macr.dataset import LabeledBatch, SplitSpec, build_debiased_split
from macr.synthetic import popularity_biased_interactions


@pytest.fixture(scope="session")
def small_split():
    data = popularity_biased_interactions(n_users=120, n_items=40, mean_degree=6, seed=3)
    return build_debiased_split(data, SplitSpec(0.1, 0.1, 7))


def random_batch(rng, n_users, n_items, n=16, duplicate=False):
    users = rng.integers(n_users, size=n)
    items = rng.integers(n_items, size=n)
    if duplicate:
        users[1], items[1] = users[0], items[0]
    return LabeledBatch(users, items, rng.integers(0, 2, size=n).astype(float))


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = {}


def record_criterion(number, passed, detail):
    ACCEPTANCE_LINES[number] = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    print(ACCEPTANCE_LINES[number])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
