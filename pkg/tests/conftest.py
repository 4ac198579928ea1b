import pytest
from hypothesis import settings

from deskdrive.scenarios import spec, straight

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture
def empty_road():
    return spec("empty", "Merging", straight(100.0))


@pytest.fixture
def two_lane_road():
    return spec("two_lane", "Overtaking", straight(100.0), lanes_left=1)


# -- acceptance summary -------------------------------------------------------------------

_acceptance: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    entry = _acceptance.setdefault(number, {"title": title, "ok": True, "ran": False, "notes": []})
    if rep.failed or rep.skipped:
        entry["ok"] = False
    if rep.when == "call":
        entry["ran"] = True
        entry["notes"].extend(v for k, v in item.user_properties if k == "measured")


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance")
    for number in sorted(_acceptance):
        e = _acceptance[number]
        status = "PASS" if e["ok"] and e["ran"] else "FAIL"
        notes = f"  ({'; '.join(e['notes'])})" if e["notes"] else ""
        terminalreporter.write_line(f"acceptance {number:2d} {status}  {e['title']}{notes}")
