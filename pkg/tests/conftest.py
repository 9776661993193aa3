from __future__ import annotations

import logging

import pytest

from crimepass.simulator import DgpConfig, generate

# one line per acceptance criterion, printed at the end of the session
CRITERIA: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    CRITERIA[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        passed, detail = CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture(autouse=True)
def _quiet_logs():
    logging.getLogger("crimepass").setLevel(logging.ERROR)
    yield


@pytest.fixture(scope="session")
def default_market():
    """Default-size synthetic market with step effects for both groups."""
    return generate(DgpConfig(victim_path=(0.018,), rival_path=(0.0, 0.0, 0.015), seed=0))


@pytest.fixture(scope="session")
def small_market():
    return generate(
        DgpConfig(n_stores=120, n_towns=10, months=30, catalog_size=60, products_mean=12.0, hazard=0.01, seed=3)
    )
