import itertools
import os
import sys

import numpy as np
import pytest

# Add the project root to the Python path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from src.components.model import Scenario, local_energy, mec_energy, offload_energy_from_gain  # noqa: E402
from src.components.scenario import gen_scenario  # noqa: E402
from src.utils.config import default_geometry, default_params  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow statistical tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running statistical trend test")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def make_instance(seed, num_users=2, num_slots=3, num_antennas=2, distance=3.0, low=5e5, high=1e6):
    """Seeded scenario with the default constants."""
    params = default_params(num_users, num_slots, num_antennas=num_antennas)
    geom = default_geometry(num_users, distance, num_antennas)
    scen, draw = gen_scenario(seed, geom, params, low, high)
    return scen, params, geom, draw


def constant_scenario(arrivals, wpt_channel, offload_channel):
    """Scenario with the same channel vectors in every slot."""
    arrivals = np.atleast_2d(np.asarray(arrivals, dtype=float))
    num_users, num_slots = arrivals.shape
    wpt = np.broadcast_to(np.asarray(wpt_channel, dtype=complex), (num_users, num_slots, len(wpt_channel)))
    offload = np.broadcast_to(np.asarray(offload_channel, dtype=complex),
                              (num_users, num_slots, len(offload_channel)))
    return Scenario(arrivals, wpt.copy(), offload.copy())


def grid_oracle(scen, params, points=200):
    """Two-slot single-user optimum by grid search over the first slot's split."""
    tau, eta = params.slot_duration, params.harvest_efficiency[0]
    a1, a2 = scen.arrivals[0]
    g1, g2 = scen.wpt_gains[0]
    off_gain = scen.offload_gains[0, 0]
    best = np.inf
    grid = np.linspace(0.0, a1, points)
    for local1, offload1 in itertools.product(grid, grid):
        if local1 + offload1 > a1:
            continue
        local2 = a1 + a2 - local1 - offload1
        e1 = local_energy(local1, 1e-28, 1e3, tau) + offload_energy_from_gain(
            offload1, off_gain, params.noise_power, params.bandwidth, tau)
        e2 = local_energy(local2, 1e-28, 1e3, tau)
        wpt = e1 / (eta * g1) + e2 / (eta * max(g1, g2))
        total = wpt + mec_energy(offload1, 1e-29, 1e3, tau)
        best = min(best, total)
    return best


@pytest.fixture
def small_instance():
    return make_instance(11)


@pytest.fixture
def single_user_instance():
    return make_instance(5, num_users=1, num_slots=3)
