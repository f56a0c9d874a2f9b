from __future__ import annotations

import numpy as np
import pytest

from mtwkit.cost_models import CostModel
from mtwkit.geometry import disk, interval
from mtwkit.pde_solver import continuation_solve, make_problem

ACCEPTANCE_LINES: dict[int, str] = {}

# smooth positive densities for the separated-interval benchmark
F_SMOOTH = {"terms": [[1.0, [0]], [0.5, [1]], [-0.3, [2]]]}
G_SMOOTH = {"terms": [[0.6, [0]], [0.2, [1]]]}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])


@pytest.fixture(scope="session")
def quad_disk_problem():
    h = 1 / 16
    return make_problem(CostModel("quadratic"), disk([0, 0], 1, h), disk([0, 0], 1, h))


@pytest.fixture(scope="session")
def quad_disk_solution(quad_disk_problem):
    return continuation_solve(quad_disk_problem)


@pytest.fixture(scope="session")
def sqrt_plus_1d_problem():
    h = 0.01
    return make_problem(CostModel("sqrt_plus"), interval(0, 1, h), interval(2, 3, h),
                        f=F_SMOOTH, g=G_SMOOTH)


@pytest.fixture(scope="session")
def sqrt_plus_1d_solution(sqrt_plus_1d_problem):
    return continuation_solve(sqrt_plus_1d_problem)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
