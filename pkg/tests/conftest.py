from fractions import Fraction

import pytest

from hitchinlab import hitchinsolve as hs
from hitchinlab.localmodel import LocalModelSpec

_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture
def acceptance_record(request):
    """Callable ``record(number, passed, detail)`` collecting one summary line."""
    lines = request.config.stash[_ACCEPTANCE]

    def record(number, passed, detail):
        lines.append((number, bool(passed), detail))

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(lines):
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def symmetric_spec():
    return LocalModelSpec(1, 1, Fraction(-1, 2))


@pytest.fixture(scope="session")
def symmetric_solution(symmetric_spec):
    """The (ell=1, m=1, c=-1/2) model on a fine grid of radius 6."""
    return hs.solve_harmonic(symmetric_spec, hs.SolveConfig(n_radii=2400, r_max=6.0))


@pytest.fixture(scope="session")
def symmetric_coarse(symmetric_spec):
    return hs.solve_harmonic(symmetric_spec, hs.SolveConfig(n_radii=300, r_max=6.0))
