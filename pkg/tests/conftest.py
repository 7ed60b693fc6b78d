import os
import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parent.parent
if str(ROOT / "src") not in sys.path:
    sys.path.insert(0, str(ROOT / "src"))

_RESULTS: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.fixture
def measured(request):
    """Attach a measured value to the criterion line printed at the end of the run."""
    marker = request.node.get_closest_marker("criterion")

    def note(text: str) -> None:
        if marker is not None:
            _RESULTS.setdefault(marker.args[0], {"title": marker.args[1], "states": [], "notes": []})["notes"].append(text)
        print(text)

    return note


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when != "call" and rep.passed:
        return
    if rep.when == "teardown" and not rep.failed:
        return
    if hasattr(rep, "wasxfail"):
        state = "XFAIL" if rep.skipped else "XPASS"
    elif rep.passed:
        state = "PASS"
    elif rep.skipped:
        state = "SKIP"
    else:
        state = "FAIL"
    entry = _RESULTS.setdefault(marker.args[0], {"title": marker.args[1], "states": [], "notes": []})
    entry["states"].append(state)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        entry = _RESULTS[number]
        states = entry["states"]
        if not states:
            continue
        if all(s in ("PASS", "XPASS") for s in states):
            verdict = "PASS"
        elif "FAIL" in states:
            verdict = "FAIL"
        else:
            verdict = "/".join(sorted(set(states)))
        notes = "; ".join(entry["notes"])
        line = f"criterion {number:2d} {verdict:5s} {entry['title']}"
        terminalreporter.write_line(line + (f"  [{notes}]" if notes else ""))


def cpu_count() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1
