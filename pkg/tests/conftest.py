from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from ddsafe.scenario import build_scenario, load_config
from ddsafe.sim import run_closed_loop

ROOT = Path(__file__).resolve().parents[1]
SCENARIOS = ROOT / "scenarios"

CRITERIA = {
    1: "quadrotor run keeps h > 0 and h_v > 0",
    2: "cover encloses the true f and g",
    3: "contraction matches a brute-force grid",
    4: "g_hat respects the declared Lipschitz bounds",
    5: "one-step box contains the true next state",
    6: "estimation error stays below its computed bound",
    7: "data-free square law keeps the state safe",
    8: "barrier index bounded, synthesized barriers valid, hysteresis separated",
    9: "logged input equals nominal input away from the velocity band",
    10: "cover width of g never grows at probe states",
}

_results: dict[int, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        if hasattr(rep, "wasxfail"):
            status = "FAIL (known, see README)"
        elif rep.passed:
            status = "PASS"
        elif rep.skipped:
            status = "SKIP"
        else:
            status = "FAIL"
        _results.setdefault(mark.args[0], []).append(status)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        st = _results[n]
        worst = next((s for s in st if s != "PASS"), "PASS")
        terminalreporter.write_line(f"criterion {n:2d}: {worst:<26} {CRITERIA.get(n, '')}")


def _run(name, **kw):
    cfg = load_config(SCENARIOS / f"{name}.yaml")
    sc = build_scenario(cfg)
    return sc, run_closed_loop(sc, **kw)


@pytest.fixture(scope="session")
def quad_run():
    """The tracking scenario, with a copy of the evidence after every measurement."""
    snaps = []

    def grab(i, t, d, ctrl):
        snaps.append((t, d.x.copy(), ctrl.evidence.copy()))

    sc, result = _run("uav_lissajous", on_measurement=grab)
    return sc, result, snaps


@pytest.fixture(scope="session")
def square_run():
    return _run("square_g")


@pytest.fixture(scope="session")
def gentle_run():
    return _run("uav_gentle")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
