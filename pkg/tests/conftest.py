import os
import sys

sys.path.insert(0, os.path.dirname(__file__))

_CRITERIA: dict[str, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number): acceptance criterion checked by the test")


def pytest_runtest_logreport(report):
    marker = dict(report.user_properties).get("criterion")
    if marker is None or (report.when != "call" and report.passed):
        return
    detail = dict(report.user_properties).get("detail", "")
    prev = _CRITERIA.get(marker)
    outcome = "PASS" if report.passed else "FAIL"
    if prev is not None and prev[0] == "FAIL":
        return
    _CRITERIA[marker] = (outcome, detail)


def pytest_runtest_setup(item):
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        item.user_properties.append(("criterion", str(mark.args[0])))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_CRITERIA, key=lambda k: (int("".join(c for c in k if c.isdigit())), k)):
        outcome, detail = _CRITERIA[key]
        terminalreporter.write_line(f"criterion {key}: {outcome}  {detail}".rstrip())
