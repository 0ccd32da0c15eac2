"""Shared fixtures plus the acceptance scoreboard.

Acceptance tests call record_criterion; the collected lines print as a
summary block at the end of the run, one pass/fail line per criterion.
"""

from pathlib import Path

import pytest

REPO = Path(__file__).resolve().parent.parent
MNIST_DIR = REPO / "data" / "mnist"

_scoreboard = []


def record_criterion(num: int, name: str, passed: bool, detail: str):
    _scoreboard.append((num, name, passed, detail))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _scoreboard:
        return
    terminalreporter.section("acceptance criteria")
    for num, name, passed, detail in sorted(_scoreboard):
        verdict = "PASS" if passed else "FAIL"
        terminalreporter.write_line(
            f"criterion {num:>2} [{verdict}] {name} :: {detail}"
        )


@pytest.fixture(scope="session")
def mnist_dir() -> Path:
    if not MNIST_DIR.exists():
        pytest.skip("mnist files not present; run projnet fetch-mnist")
    return MNIST_DIR
