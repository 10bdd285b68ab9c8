import sys

import numpy as np
import pytest

from quantemu.lti import ContinuousLti, discretize
from quantemu.mpc import MpcConfig
from quantemu.quantization import build_alphabet

B_EX1 = np.array([[1.0, 0.0, -1.0, 0.0], [0.0, 1.0, 0.0, 1.0]])
H_SEC5 = np.array([[0.0, 1.0], [-1.0, -2.0]])
H_STEP = 0.05


@pytest.fixture(scope="session")
def disc():
    return discretize(np.zeros((2, 2)), B_EX1, H_STEP)


@pytest.fixture(scope="session")
def ref_sys():
    return ContinuousLti(H_SEC5)


@pytest.fixture(scope="session")
def alphabet(disc):
    return build_alphabet(disc.B_d)


@pytest.fixture(scope="session")
def mpc_cfg():
    return MpcConfig(P=5 * np.eye(2), Q=5 * np.eye(2), R=0.05 * np.eye(4), N=2)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
