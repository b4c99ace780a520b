import pytest

_acceptance: dict[int, tuple[str, str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or report.when != "call":
        return
    number, title = marker.args
    detail = getattr(item, "acceptance_detail", "")
    if report.failed:
        detail = str(call.excinfo.value).splitlines()[0] if call.excinfo else detail
    _acceptance[number] = ("PASS" if report.passed else "FAIL", title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_acceptance):
        status, title, detail = _acceptance[number]
        terminalreporter.write_line(f"[{status}] {number}. {title}: {detail}")
