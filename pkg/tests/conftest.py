import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

_criteria: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call" and not (call.when == "setup" and call.excinfo):
        return
    number, title = marker.args
    details = dict(item.user_properties).get("details", "")
    passed = call.excinfo is None
    entry = _criteria.setdefault(number, [title, True, []])
    entry[1] &= passed
    if details:
        entry[2].append(details)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, passed, details = _criteria[number]
        line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}"
        if details:
            line += "  [" + "; ".join(details) + "]"
        terminalreporter.write_line(line)
