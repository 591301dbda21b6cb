import warnings

import numpy as np
import pytest

from pwstab import model
from pwstab.profile import WaveProfile, guess_from_center, solve_profile


def solved(system, amplitude, m=128):
    guess, X = guess_from_center(system, [0.0, 0.0], amplitude, m=m)
    return solve_profile(system, guess, X, amplitude=amplitude)


@pytest.fixture(scope="session")
def pendulum_profile():
    return solved(model.pendulum(), 2.0)


@pytest.fixture(scope="session")
def pendulum2_profile():
    return solved(model.pendulum(2), 2.0)


@pytest.fixture(scope="session")
def heat_profile():
    return WaveProfile.constant(model.heat(2, 1), [0.0, 0.0], m=16, X=1.0)


@pytest.fixture
def quiet():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one summary line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
