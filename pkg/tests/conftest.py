import numpy as np
import pytest

from persianrug.model import ToyModel


@pytest.fixture
def rng():
    return np.random.default_rng(20241018)


def random_model(rng, n_s, n_d, bias=0.0):
    return ToyModel(
        rng.standard_normal((n_d, n_s)) / np.sqrt(n_d),
        rng.standard_normal((n_s, n_d)) / np.sqrt(n_d),
        bias + 0.1 * rng.standard_normal(n_s),
    )


ACCEPTANCE_LINES = []


class AcceptanceReport:
    """Records one pass/fail line per acceptance criterion, then asserts it."""

    def check(self, number: int, title: str, ok: bool, detail: str) -> None:
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line


@pytest.fixture
def acceptance():
    return AcceptanceReport()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
