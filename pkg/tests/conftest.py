import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cpqlbench.mdp_core import random_mdp, random_policy, two_state_toggle

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def toggle():
    return two_state_toggle()


def make_instance(seed, S=6, A=3, gamma=0.9, floor=0.05):
    rng = np.random.default_rng(seed)
    mdp = random_mdp(S, A, gamma, rng)
    return mdp, random_policy(S, A, rng, floor=floor), random_policy(S, A, rng)


@pytest.fixture
def instance():
    return make_instance(0)


# the desk-scale chain fixture used by directional experiments
CHAIN = dict(kind="chain", length=10, slip=0.1, gamma=0.99)
CHAIN_DATA = dict(quality="medium", size=40, horizon=20)

# one line per acceptance criterion, echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":").split("/")[0])):
            terminalreporter.write_line(line)
