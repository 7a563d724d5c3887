import numpy as np
import pytest

from modalsense.fem import assemble, material
from modalsense.mesh import generate_bar
from modalsense.modal import modal_analysis

_ACCEPTANCE = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(id, title): acceptance criterion")


def pytest_runtest_logreport(report):
    if report.when == "call" and hasattr(report, "acceptance"):
        measured = ", ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in report.user_properties)
        cid, name, title = report.acceptance
        _ACCEPTANCE.append((cid, title, name + (f" [{measured}]" if measured else ""), report.outcome))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is not None and rep.when == "call":
        rep.acceptance = (int(mark.args[0]), item.name, mark.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted({c for c, *_ in _ACCEPTANCE}):
        rows = [r for r in _ACCEPTANCE if r[0] == cid]
        ok = all(r[3] == "passed" for r in rows)
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {cid}: {rows[0][1]}")
        for _, _, detail, outcome in rows:
            terminalreporter.write_line(f"    {'ok  ' if outcome == 'passed' else 'FAIL'} {detail}")


@pytest.fixture(scope="session")
def aluminium():
    return material("aluminium")


@pytest.fixture(scope="session")
def small_bar():
    return generate_bar(0.2, 0.02, 0.02, [10, 1, 1])


@pytest.fixture(scope="session")
def bar_system(small_bar, aluminium):
    return assemble(small_bar, aluminium)


@pytest.fixture(scope="session")
def bar_model(small_bar, bar_system, aluminium):
    return modal_analysis(bar_system, aluminium, small_bar.content_hash)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
