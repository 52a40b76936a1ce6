import numpy as np
import pytest

from fbsde_reversal.experiment import PRESETS, preset_config
from fbsde_reversal.lq_model import LqProblem
from fbsde_reversal.sde_core import make_grid


def scalar_problem(A=0.0, B=1.0, sigma=1.0, Q=1.0, R=1.0, Q_f=0.0, m0=0.0, Sigma0=0.0, horizon=1.0):
    return LqProblem(
        A=[[A]], B=[[B]], sigma=[[sigma]], Q=[[Q]], R=[[R]], Q_f=[[Q_f]],
        m0=[m0], Sigma0=[[Sigma0]], horizon=horizon,
    )


@pytest.fixture
def mass_spring():
    return preset_config("mass-spring").lq_problem()


@pytest.fixture
def grid():
    return make_grid(1.0, 0.02)


@pytest.fixture
def mass_spring_data():
    return PRESETS["mass-spring"]


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


_ACCEPTANCE = {}


def record_acceptance(number, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}: {detail}"
    _ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[number])
