"""Prints one PASS/FAIL/SKIP line per acceptance criterion after the run."""

_results: list[tuple[str, str, str]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported in the summary")


def pytest_runtest_setup(item):
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        item.user_properties.append(("criterion", mark.args[0]))


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    props = dict(report.user_properties)
    name = props.get("criterion")
    if name is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        if report.passed:
            status = "PASS"
        elif report.skipped:
            status = "SKIP"
        else:
            status = "FAIL"
        _results.append((status, name, props.get("detail", "")))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for status, name, detail in _results:
        line = f"[{status}] {name}"
        if detail:
            line += f" ({detail})"
        terminalreporter.write_line(line)
