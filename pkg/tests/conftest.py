import os

import pytest
import torch
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

torch.set_num_threads(int(os.environ.get("SHEARO_THREADS", "1")))

_CRITERIA: dict[int, tuple[str, str, str]] = {}


@pytest.fixture
def rng():
    import numpy as np

    return np.random.default_rng(1234)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    measured = dict(rep.user_properties).get("measured", "")
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _CRITERIA[number] = (title, "PASS" if rep.passed else "SKIP" if rep.skipped else "FAIL", measured)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, verdict, measured = _CRITERIA[number]
        line = f"{verdict} criterion {number:2d} {title}"
        terminalreporter.write_line(f"{line}: {measured}" if measured else line)
