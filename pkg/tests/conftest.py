import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from invdyn.core import PhysicalParams, make_grid  # noqa: E402
from invdyn.demand import DemandConfig, Regime, generate  # noqa: E402
from invdyn.dynamics import simulate  # noqa: E402


@pytest.fixture(scope="session")
def ar1_truth():
    grid = make_grid(0, 30, 0.2)
    return simulate(PhysicalParams(), generate(DemandConfig(Regime.AR1, seed=1), grid))


@pytest.fixture(scope="session")
def short_truth(ar1_truth):
    """Ten-step prefix used by the gradient checks."""
    return ar1_truth.slice(0, 10)


_ACCEPTANCE: dict[str, str] = {}


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion; printed in the terminal summary."""

    def record(key: str, passed: bool, detail: str) -> bool:
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {key}: {detail}"
        _ACCEPTANCE[key] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[key])
