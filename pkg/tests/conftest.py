import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import pytest

_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    title = getattr(item.function, "criterion", None)
    if title and (rep.when == "call" or rep.failed):
        if rep.when == "call" or item.nodeid not in _CRITERIA:
            _CRITERIA[item.nodeid] = (title, rep.passed)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for title, ok in sorted(_CRITERIA.values()):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {title}")
