import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_LINES: list[tuple[str, str]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(label): an acceptance criterion with a pass/fail report line")


@pytest.fixture
def criterion(request):
    """``record(passed, detail)`` adds the report line of the current criterion."""
    label = request.node.get_closest_marker("acceptance").args[0]

    def record(passed: bool, detail: str) -> bool:
        _LINES.append((label, f"{'PASS' if passed else 'FAIL'}  {label}: {detail}"))
        return passed

    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker and rep.when == "call" and rep.failed and not hasattr(rep, "wasxfail"):
        label = marker.args[0]
        if not any(lbl == label for lbl, _ in _LINES):
            _LINES.append((label, f"FAIL  {label}: {call.excinfo.typename}: {call.excinfo.value}"))


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in _LINES:
            terminalreporter.write_line(line)
