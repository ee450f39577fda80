import pytest

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        details = [v for k, v in item.user_properties if k == "measured"]
        prev = _CRITERIA.get(number)
        ok = rep.outcome == "passed" and (prev is None or prev[1])
        _CRITERIA[number] = (title, ok, (prev[2] if prev else []) + details)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok, details = _CRITERIA[number]
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {title}"
        if details:
            line += "  [" + "; ".join(details) + "]"
        tr.write_line(line)


@pytest.fixture
def measured(request):
    """Attach a measured value to the criterion summary line."""

    def note(text):
        request.node.user_properties.append(("measured", text))

    return note
