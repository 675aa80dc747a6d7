"""Shared fixtures and hypothesis profile."""
import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from samdp_lab.envs import RandomMdpSpec, generate_random_samdp, random_tabular_policy
from samdp_lab.mdp_core import TabularPolicy

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_instance(seed: int, n_states: int = 3, n_actions: int = 2, max_budget: int = 3,
                    discount: float = 0.9, min_prob: float = 0.0):
    samdp = generate_random_samdp(RandomMdpSpec(n_states, n_actions, max_budget, discount,
                                                seed=seed))
    rng = np.random.default_rng(seed + 1)
    pi = TabularPolicy(random_tabular_policy(rng, n_states, n_actions, min_prob))
    return samdp, pi


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one PASS/FAIL line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list = []


def verdict(number: int, ok: bool, detail: str) -> bool:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
