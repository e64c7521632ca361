import numpy as np
import pytest

from bilevel.model import Dataset, GroupStructure


def random_problem(rng, n=20, sizes=(2, 3, 1, 4), noise=1.0, scale=1.0):
    groups = GroupStructure(tuple(sizes))
    X = rng.standard_normal((n, groups.p)) * scale
    beta = rng.standard_normal(groups.p)
    y = X @ beta + noise * rng.standard_normal(n)
    return Dataset(X, y, groups)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_CRITERIA: list[str] = []


@pytest.fixture
def report_criterion():
    """Record a one-line pass/fail verdict that is echoed at the end of the run."""

    def record(number, passed, detail):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        _CRITERIA.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
