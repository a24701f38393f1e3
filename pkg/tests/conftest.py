import dataclasses
import os
import sys
import time

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

from emltrack.data_model import PipelineConfig  # noqa: E402
from emltrack.pipeline import build_dataset  # noqa: E402
from emltrack.synth import SynthConfig, generate  # noqa: E402

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

SMALL = SynthConfig(n_users=4, n_trials_per_user=12, trial_duration_s=60.0,
                    baseline_durations_s=(60.0, 60.0, 30.0, 30.0), discomfort_rate=0.25, seed=3)


@pytest.fixture(scope="session")
def small_synth():
    return generate(SMALL)


@pytest.fixture(scope="session")
def small_dataset(small_synth):
    return build_dataset(small_synth.sensors, small_synth.questionnaire, PipelineConfig())


# wall-clock seconds spent building the session fixtures
TIMINGS: dict[str, float] = {}


@pytest.fixture(scope="session")
def full_synth():
    t0 = time.perf_counter()
    res = generate(SynthConfig())
    TIMINGS["synth"] = time.perf_counter() - t0
    return res


@pytest.fixture(scope="session")
def full_dataset(full_synth):
    t0 = time.perf_counter()
    ds = build_dataset(full_synth.sensors, full_synth.questionnaire, PipelineConfig())
    TIMINGS["dataset"] = time.perf_counter() - t0
    return ds


@pytest.fixture(scope="session")
def full_model(full_dataset):
    from emltrack.pipeline import train_two_stage

    return train_two_stage(full_dataset.windows, full_dataset.config, baseline=full_dataset.baseline)


def replace(cfg, **kw):
    return dataclasses.replace(cfg, **kw)


# -- acceptance summary --------------------------------------------------------------------

_CRITERIA: list[tuple[int, str, str]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, text): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, text = mark.args
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        _CRITERIA.append((n, "PASS" if rep.passed else "FAIL", text))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n, status, text in sorted(_CRITERIA):
        terminalreporter.write_line(f"{status} criterion {n}: {text}")
