import numpy as np
import pytest

from src.components.dual_solver import ellipsoid_maximize
from src.components.instance import ExecutionMode, ProblemInstance
from src.components.primal_program import solve_primal_program
from tests.conftest import grid_oracle, make_instance


@pytest.mark.parametrize("seed", [3, 8])
def test_matches_grid_search_and_dual_bound(seed):
    scen, params, _, _ = make_instance(seed, num_users=1, num_slots=2)
    instance = ProblemInstance.offline(scen, params)
    program = solve_primal_program(instance)
    assert program is not None
    assert program.objective == pytest.approx(grid_oracle(scen, params), rel=5e-3)
    assert program.objective >= ellipsoid_maximize(instance).dual_value * (1 - 1e-6)


def test_task_and_ap_constraints_hold():
    scen, params, _, _ = make_instance(2, num_users=2, num_slots=4, num_antennas=4)
    program = solve_primal_program(ProblemInstance.offline(scen, params))
    executed = np.cumsum(program.local_bits + program.offload_bits, axis=1)
    arrived = np.cumsum(scen.arrivals, axis=1)
    total = float(np.sum(scen.arrivals))
    assert np.all(executed[:, :-1] <= arrived[:, :-1] + 1e-6 * total)
    np.testing.assert_allclose(executed[:, -1], arrived[:, -1], rtol=1e-6)
    offloaded_before = np.concatenate(([0.0], np.cumsum(np.sum(program.offload_bits, axis=0))[:-1]))
    assert np.all(np.cumsum(program.mec_bits) <= offloaded_before + 1e-6 * total)
    assert np.sum(program.mec_bits) == pytest.approx(np.sum(program.offload_bits), rel=1e-6, abs=1e-6 * total)
    assert program.mec_bits[0] == 0.0
    assert not np.any(program.offload_bits[:, -1])
    assert np.all(np.diff(program.local_bits, axis=1) >= -1e-7 * total)
    assert np.all(np.diff(program.mec_bits[1:]) >= -1e-7 * total)


def test_banked_energy_makes_computing_free():
    scen, params, _, _ = make_instance(4, num_users=2, num_slots=3)
    instance = ProblemInstance.build(params, scen.arrivals, scen.wpt_channels, scen.offload_channels,
                                     energy_credit=np.full(2, 1e12))
    program = solve_primal_program(instance)
    assert program.objective <= 1e-6 * instance.energy_scale()


def test_local_only_and_ap_backlog():
    scen, params, _, _ = make_instance(6, num_users=2, num_slots=3)
    local = solve_primal_program(ProblemInstance.offline(scen, params, ExecutionMode.LOCAL_ONLY))
    assert not np.any(local.offload_bits) and not np.any(local.mec_bits)
    np.testing.assert_allclose(np.sum(local.local_bits, axis=1), np.sum(scen.arrivals, axis=1), rtol=1e-6)

    instance = ProblemInstance.build(params, scen.arrivals, scen.wpt_channels, scen.offload_channels,
                                     ap_backlog=3e5, pin_first_mec=False)
    program = solve_primal_program(instance)
    drained = np.sum(program.mec_bits)
    assert drained == pytest.approx(3e5 + np.sum(program.offload_bits), rel=1e-6)
    assert np.all(np.diff(program.mec_bits) >= -1e-7 * drained)
