import numpy as np
import pytest

from mppbsde.mpp import build_model

POISSON = {"kind": "poisson", "horizon": 1.0, "marks": ["a"], "rate": 1.0}
POISSON2 = {"kind": "poisson", "horizon": 1.0, "marks": ["a", "b"], "rate": 1.0, "mark_probs": [0.5, 0.5]}
UNIFORM = {"kind": "single_jump", "horizon": 1.0, "marks": ["j"], "uniform": {"upper": 1.0}}
UNIFORM_PARTIAL = {"kind": "single_jump", "horizon": 1.0, "marks": ["x", "y"], "mark_probs": [0.4, 0.6],
                   "uniform": {"upper": 1.0, "mass": 0.8}}
MARKOV = {"kind": "markov_hazard", "horizon": 1.0, "marks": ["up", "down"], "grid": [0.0, 0.5, 1.0],
          "rates": {"up": [0.5, 1.0], "down": [1.5, 0.5], "Δ": 1.0},
          "transition": {"up": [0.2, 0.8], "down": [0.6, 0.4], "Δ": [0.3, 0.7]}}


@pytest.fixture(scope="session")
def poisson():
    return build_model(POISSON)


@pytest.fixture(scope="session")
def poisson2():
    return build_model(POISSON2)


@pytest.fixture(scope="session")
def uniform_jump():
    return build_model(UNIFORM)


@pytest.fixture(scope="session")
def partial_jump():
    return build_model(UNIFORM_PARTIAL)


@pytest.fixture(scope="session")
def markov():
    return build_model(MARKOV)


@pytest.fixture(params=["poisson", "poisson2", "partial_jump", "markov"])
def any_model(request):
    return request.getfixturevalue(request.param)


_ACCEPTANCE = []


@pytest.fixture
def criterion(request):
    """Record a pass/fail line for an acceptance criterion; printed at the end of the run."""

    def record(label, ok, detail):
        _ACCEPTANCE.append((label, bool(ok), detail))
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label, ok, detail in sorted(_ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"{label}: {'PASS' if ok else 'FAIL'}  {detail}")
