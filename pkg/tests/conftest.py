"""Prints one PASS/FAIL line per acceptance criterion at the end of the run."""
import pytest

_OUTCOMES: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        state = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        previous = _OUTCOMES.get(number, ("PASS", title))[0]
        # a criterion split across several tests passes only if all of them pass
        if previous != "PASS":
            state = previous
        _OUTCOMES[number] = (state, title)


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_OUTCOMES):
        state, title = _OUTCOMES[number]
        terminalreporter.write_line(f"criterion {number}: {state}  {title}")
