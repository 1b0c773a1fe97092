import os

import pytest

from hail.config import HailConfig
from hail.pipeline import run_reproduction

_VERDICTS: list[tuple[int, str, str]] = []


@pytest.fixture(scope="session")
def verdict():
    """Record one acceptance line; the lines are repeated in the terminal summary."""

    def record(number: int, ok: bool, detail: str, report: str = "") -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        print(line, flush=True)
        _VERDICTS.append((number, line, report))
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance")
        for _, line, _ in sorted(_VERDICTS):
            terminalreporter.write_line(line)
        for _, _, report in sorted(_VERDICTS):
            if report:
                terminalreporter.write("\n" + report)


def _run_dir(tmp_path_factory, name):
    keep = os.environ.get("HAIL_ACCEPTANCE_OUT")
    if keep:
        return os.path.join(keep, name)
    return tmp_path_factory.mktemp(name)


@pytest.fixture(scope="session")
def reproduction(tmp_path_factory):
    """Desk reproduction with the default configuration; shared by every end-to-end test."""
    return run_reproduction(HailConfig(), _run_dir(tmp_path_factory, "run1"))


@pytest.fixture(scope="session")
def reproduction_again(tmp_path_factory, reproduction):
    return run_reproduction(HailConfig(), _run_dir(tmp_path_factory, "run2"))
