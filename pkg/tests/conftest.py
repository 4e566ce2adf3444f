import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from jointtraj import mrisys, trajectory  # noqa: E402

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


@pytest.fixture(scope="session")
def small_setup():
    """16x16 grid, 2 coils, 4 in-out spokes pulled in from the wrap boundary."""
    n = 16
    traj = trajectory.gen_radial(4, 32, grid_n=n)
    traj = traj.with_coords(0.95 * traj.coords)
    smaps = mrisys.synth_coil_maps(n, 2)
    images = mrisys.gen_phantoms(4, n, 1).images
    return n, traj, smaps, images
