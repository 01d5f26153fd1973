import numpy as np
import pytest

from misgen.env import Level


def flat_level(width=12, height=8, coin=None, spawn=(1, 6), monsters=(), lava=(), walls=(), seed=0):
    """Open room with a one-row floor; extra lava/wall cells given as (x, y)."""
    t = np.zeros((height, width), dtype=np.int8)
    t[0, :] = t[-1, :] = 1
    t[:, 0] = t[:, -1] = 1
    for x, y in lava:
        t[y, x] = 2
    for x, y in walls:
        t[y, x] = 1
    coin = coin if coin is not None else (width - 2, height - 2)
    return Level(width, height, t, coin, tuple(monsters), spawn, seed)


@pytest.fixture
def room():
    return flat_level()


@pytest.fixture(autouse=True)
def _clean_audit():
    from misgen.rollout import REWARD_AUDIT
    REWARD_AUDIT.reset()
    REWARD_AUDIT.context = "learner"
    yield


# -- acceptance summary -------------------------------------------------------------

_CRITERIA: dict[str, list[bool]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(id): acceptance criterion a test belongs to")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _CRITERIA.setdefault(marker.args[0], []).append(report.passed)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(_CRITERIA, key=lambda c: int(c[1:])):
        results = _CRITERIA[cid]
        terminalreporter.write_line(f"{cid}: {'PASS' if all(results) else 'FAIL'} "
                                    f"({sum(results)}/{len(results)} checks)")
