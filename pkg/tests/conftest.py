from __future__ import annotations

import os
from pathlib import Path

import pytest

_RESULTS: dict[int, tuple[str, str]] = {}


def pytest_addoption(parser):
    parser.addoption("--full-acceptance", action="store_true", default=False,
                     help="run the training-based acceptance protocols at full scale (hours)")


@pytest.fixture(scope="session")
def full_acceptance(request) -> bool:
    return bool(request.config.getoption("--full-acceptance")) or os.environ.get(
        "BLINDSPECKLE_FULL_ACCEPTANCE", "") not in ("", "0")


@pytest.fixture(scope="session")
def runs_dir() -> Path:
    """Where the training-based protocols keep checkpoints and results."""
    return Path(os.environ.get("BLINDSPECKLE_RUNS", Path(__file__).resolve().parents[1] / "runs"))


@pytest.fixture
def record_criterion():
    def record(number: int, passed: bool | None, detail: str) -> None:
        status = "SKIP" if passed is None else ("PASS" if passed else "FAIL")
        _RESULTS[number] = (status, detail)
        print(f"criterion {number}: {status} {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        status, detail = _RESULTS[n]
        terminalreporter.write_line(f"criterion {n:>2}: {status}  {detail}")
