import sys

import numpy as np
import pytest

from rsdrift.experiments import baseline_spec


@pytest.fixture
def baseline():
    return baseline_spec()


@pytest.fixture
def cfg(baseline):
    return baseline.cfg


@pytest.fixture
def rng():
    return np.random.default_rng(12345)



def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for k in sorted(results):
            terminalreporter.write_line(results[k])
