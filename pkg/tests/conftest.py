import math

import pytest

from dyadic.model import SpectralModel

#: (number, description, passed) tuples recorded by the acceptance tests
acceptance_results = []


@pytest.fixture(scope="session")
def model2():
    """The workhorse geometric model with ratio 2."""
    return SpectralModel.geometric(2.0)


@pytest.fixture
def acceptance():
    """Recorder for acceptance criteria; one pass/fail line per criterion."""

    def record(number, description, passed):
        acceptance_results.append((number, description, bool(passed)))
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not acceptance_results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number, description, passed in sorted(acceptance_results):
        verdict = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"ACCEPTANCE {number} {verdict} - {description}")


def tail_sum(fn, start, n_terms=4000):
    """Brute-force partial summation oracle, independent of any closed form."""
    return math.fsum(fn(i) for i in range(start, start + n_terms))
