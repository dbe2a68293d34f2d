import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from beaconloc.environment import load_map
from beaconloc.simulator import MotionNoiseConfig, simulate_split

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def world10():
    return load_map("world10")


@pytest.fixture(scope="session")
def small_ds(world10):
    return simulate_split(world10, MotionNoiseConfig(), 4, seed=11, n_steps=12)


@pytest.fixture
def rng():
    return np.random.Generator(np.random.Philox(1234))
