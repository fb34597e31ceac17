import numpy as np
import pytest

from levyscale.ergodics import sample_invariant, tabulate_sine_centering
from levyscale.model import make_linear_benchmark, make_sine_benchmark


@pytest.fixture(scope="session")
def linear():
    return make_linear_benchmark()


@pytest.fixture(scope="session")
def sine():
    return make_sine_benchmark()


@pytest.fixture(scope="session")
def sine_table():
    return tabulate_sine_centering(0.5, 1.0, 1.5)


@pytest.fixture(scope="session")
def linear_ensemble(linear):
    return sample_invariant(linear, 1.0, n=100_000, rng=11, rate=1.0, antithetic=True)


@pytest.fixture
def gen():
    return np.random.default_rng(12345)


_RESULTS = pytest.StashKey()


@pytest.fixture
def criterion(request, capsys):
    """Record one acceptance line; printed immediately and again in the terminal summary."""

    def record(number, passed, detail):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        request.config.stash.setdefault(_RESULTS, []).append(line)
        with capsys.disabled():
            print("\n" + line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_RESULTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
