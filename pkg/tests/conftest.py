import numpy as np
import pytest

from privfilter.toy import gen_toy

_acceptance_results = []


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def toy_manifest():
    return gen_toy(patients=6, images_per_patient=4, d=16, cluster_sd=0.3, seed=7,
                   singletons=20)


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance.py" in report.nodeid:
        _acceptance_results.append((report.nodeid.split("::")[-1], report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_results:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in _acceptance_results:
        terminalreporter.write_line(f"{'PASS' if outcome == 'passed' else 'FAIL'}  {name}")
