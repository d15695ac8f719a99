import os
import sys

import pytest
from hypothesis import settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")

_ACCEPTANCE: list[tuple[str, str, str]] = []


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        props = dict(report.user_properties)
        name = props.get("criterion", report.nodeid.split("::")[-1])
        status = "PASS" if report.outcome == "passed" else "FAIL"
        _ACCEPTANCE.append((status, name, props.get("detail", "")))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for status, name, detail in _ACCEPTANCE:
        line = f"{status} {name}"
        if detail:
            line += f" | {detail}"
        terminalreporter.write_line(line)


@pytest.fixture
def criterion(record_property):
    """Label an acceptance test and attach a measured detail to its summary line."""

    class _Criterion:
        def __call__(self, name: str) -> None:
            record_property("criterion", name)

        def detail(self, text: str) -> None:
            record_property("detail", text)

    return _Criterion()
