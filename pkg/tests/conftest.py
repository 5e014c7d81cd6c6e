import numpy as np
import pytest

from oseenstab.config import parse_config
from oseenstab.mesh import setup_mesh
from oseenstab.operators import MACGrid, assemble_dirichlet_map, assemble_oseen
from oseenstab.pipeline import build_core

UNSTABLE_16 = """
[mesh]
dims = 16
patch_side = "left"
patch_fraction = 0.5
collar_depth = 2
[physics]
nu0 = 0.01
equilibrium = "manufactured"
profile = "shear-cell"
amplitude = 2.0
"""

REST_16 = """
[mesh]
dims = 16
[physics]
nu0 = 0.01
equilibrium = "zero"
"""


def make_grid(n=16, side="left", fraction=0.5, depth=2):
    return MACGrid(setup_mesh((n, n), None, side, fraction, depth))


@pytest.fixture(scope="session")
def grid16():
    return make_grid(16)


@pytest.fixture(scope="session")
def stokes16(grid16):
    ops = assemble_oseen(grid16, 1e-2, np.zeros(grid16.n))
    assemble_dirichlet_map(ops)
    return ops


@pytest.fixture(scope="session")
def unstable16():
    """Shear-cell equilibrium (amplitude 2, nu0 = 1e-2) with one complex unstable pair, designed law."""
    return build_core(parse_config(UNSTABLE_16), rng=np.random.default_rng(0))


@pytest.fixture(scope="session")
def rest16():
    return build_core(parse_config(REST_16), rng=np.random.default_rng(0))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
