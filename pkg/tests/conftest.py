import pytest

_results: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    entry = _results.setdefault(n, [title, True, [], []])
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        if not rep.passed:
            entry[1] = False
            entry[2].append(item.name)
        entry[3].extend(f"{k}: {v}" for k, v in item.user_properties)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        title, ok, failed, details = _results[n]
        line = f"ACCEPTANCE {n} {'PASS' if ok else 'FAIL'}: {title}"
        if failed:
            line += f"  (failed: {', '.join(failed)})"
        terminalreporter.write_line(line)
        for d in details:
            terminalreporter.write_line(f"    {d}")
