import numpy as np
import pytest

from motfm.model import Collection


def random_collection(rng, M=3, max_order=3, max_dim=4, T=6):
    arrays = []
    for _ in range(M):
        order = int(rng.integers(1, max_order + 1))
        dims = tuple(int(d) for d in rng.integers(1, max_dim + 1, size=order))
        arrays.append(rng.standard_normal((T,) + dims))
    return Collection.from_arrays(arrays)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    """Record one pass/fail line for an acceptance criterion."""

    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
