import math

import numpy as np
import pytest

from dissdp.grid import default_grids
from dissdp.model import get_model
from dissdp.pipelines import Workspace

PHI = (1 + math.sqrt(5)) / 2
PSI = (1 - math.sqrt(5)) / 2  # antistabilizing Riccati root


@pytest.fixture(scope="session")
def lq():
    return get_model("lq")


@pytest.fixture(scope="session")
def lq_wide():
    return get_model("lq-wide")


@pytest.fixture(scope="session")
def nl():
    return get_model("nonlinear")


@pytest.fixture(scope="session")
def lq_ws(lq):
    return Workspace(lq)


@pytest.fixture(scope="session")
def lq_wide_ws(lq_wide):
    return Workspace(lq_wide)


@pytest.fixture(scope="session")
def nl_ws(nl):
    return Workspace(nl)


@pytest.fixture(scope="session")
def nl_radius(nl_ws):
    from dissdp.mpc import practical_radius

    return practical_radius(nl_ws.model, nl_ws.grids, nl_ws.v_plus.value)


@pytest.fixture(scope="session")
def lq_grids(lq):
    return default_grids(lq)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


# criterion number -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
