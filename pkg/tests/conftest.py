import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

# Outcomes of acceptance tests, keyed by criterion number.
_criteria: dict[str, list[tuple[str, str, str]]] = {}


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            item.user_properties.append(("criterion", mark.args))


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        number, title = props["criterion"]
        outcome = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        detail = ""
        if report.outcome == "skipped" and isinstance(report.longrepr, tuple):
            detail = report.longrepr[2].removeprefix("Skipped: ")
        elif report.outcome == "failed":
            detail = str(report.longrepr).strip().splitlines()[-1][:160]
        _criteria.setdefault(str(number), []).append((title, outcome, detail))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria, key=int):
        for title, outcome, detail in _criteria[number]:
            line = f"criterion {number:<3} {outcome:<4}  {title}"
            terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))
