import socket

import pytest


def free_tcp_address():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return f"127.0.0.1:{s.getsockname()[1]}"


@pytest.fixture(params=["inproc", "tcp"])
def world_address(request):
    """None selects a fresh in-process address; otherwise a free local TCP port."""
    return None if request.param == "inproc" else free_tcp_address()


_criteria: dict[str, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): test that decides one acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    report = (yield).get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and report.passed):
        return
    if report.passed:
        status = "PASS"
    elif hasattr(report, "wasxfail"):
        status = "XFAIL"
    elif report.skipped:
        status = "SKIP"
    else:
        status = "FAIL"
    detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    if status in ("XFAIL", "SKIP") and not detail:
        detail = report.wasxfail if status == "XFAIL" else str(report.longrepr[-1])
    _criteria[marker.args[0]] = (status, f"{detail} ({report.duration:.1f} s)".strip())


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name, (status, detail) in _criteria.items():
        terminalreporter.write_line(f"{status:5} {name}: {detail}")
