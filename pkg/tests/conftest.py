import os

import pytest
from hypothesis import HealthCheck, settings

from beaubounds import ContinuedFraction, PrecisionContext
from beaubounds.arithmetic import convergents
from beaubounds.circlemap import arnold, build, rotation
from beaubounds.experiments import DEFAULT_MAPS, prepare

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", max_examples=500, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def ctx():
    return PrecisionContext(256)


@pytest.fixture(scope="session")
def golden_table():
    return convergents(ContinuedFraction.golden(64))


@pytest.fixture(scope="session")
def arnold0(ctx):
    """Arnold critical map with offset 0 (0 is a fixed point)."""
    return build(arnold("0"), ctx)


@pytest.fixture(scope="session")
def golden_rotation(ctx):
    g = ContinuedFraction.golden(64).value(ctx)
    return build(rotation(g), ctx)


@pytest.fixture(scope="session")
def tuned_arnold():
    """Arnold golden map certified to depth 15 (partitions up to level 12)."""
    return prepare("cubic_c0", arnold(), ContinuedFraction.golden(), 15)


@pytest.fixture(scope="session")
def default_suite():
    """Every default map tuned to golden with bounds available through level 12."""
    return {mid: prepare(mid, spec, ContinuedFraction.golden(), 16) for mid, spec in DEFAULT_MAPS}


# -- acceptance summary: one line per criterion ------------------------------

def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(code, title): acceptance criterion reported in the summary")
    config._criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    code, title = mark.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    if rep.failed and not detail:
        detail = str(rep.longrepr).strip().splitlines()[-1][:160]
    item.config._criteria[code] = (title, rep.passed and rep.when == "call", detail)


def pytest_terminal_summary(terminalreporter, config):
    results = getattr(config, "_criteria", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for code in sorted(results, key=lambda c: int(c[1:])):
        title, ok, detail = results[code]
        terminalreporter.write_line(f"{code:>3} {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else ""))
