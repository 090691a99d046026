import numpy as np
import pytest

from src.components.dual_solver import EllipsoidOptions
from src.components.instance import ExecutionMode
from src.components.model import Allocation, Scenario
from src.components.scenario import PredictedScenario, PredictionErrorModel, gen_predictions
from src.schemes.baselines import solve_myopic
from src.schemes.offline import solve_offline
from src.schemes.online import (
    OnlineState,
    build_window_problem,
    solve_sliding_window,
    update_residuals,
    window_log_frame,
)
from src.utils.errors import ModelDomainError, ResidualInvariantError
from tests.conftest import make_instance


def _state(num_users=2, num_slots=4, slot=0):
    state = OnlineState.initial(num_users, num_slots, 2)
    state.slot = slot
    return state


def test_first_window_with_full_horizon_is_offline_problem():
    scen, params, _, _ = make_instance(3, num_users=2, num_slots=4)
    problem = build_window_problem(_state(), scen, PredictedScenario.perfect(scen), 4, params)
    instance = problem.instance
    np.testing.assert_array_equal(instance.arrivals, scen.arrivals)
    np.testing.assert_array_equal(instance.wpt_channels, scen.wpt_channels)
    assert not instance.mec_mask[0]
    assert not instance.offload_mask[:, -1].any()
    assert instance.ap_backlog == 0.0


def test_window_uses_truth_now_and_predictions_later():
    scen, params, geom, draw = make_instance(3, num_users=2, num_slots=4)
    pred = gen_predictions(scen, PredictionErrorModel.uniform(0.3), geom, 5, draw)
    state = _state(slot=1)
    state.user_residuals = np.array([1e5, 0.0])
    state.ap_residual = 2e5
    problem = build_window_problem(state, scen, pred, 2, params)
    instance = problem.instance
    np.testing.assert_allclose(instance.arrivals[:, 0], scen.arrivals[:, 1] + [1e5, 0.0])
    np.testing.assert_array_equal(instance.arrivals[:, 1], pred.arrivals[:, 2])
    np.testing.assert_array_equal(instance.offload_channels[:, 0], scen.offload_channels[:, 1])
    np.testing.assert_array_equal(instance.wpt_channels[:, 1], pred.wpt_channels[:, 2])
    assert instance.mec_mask.all()
    assert instance.offload_mask.all()
    assert instance.ap_backlog == 2e5


def test_window_truncated_at_horizon_end():
    scen, params, _, _ = make_instance(3, num_users=1, num_slots=4)
    problem = build_window_problem(_state(1, 4, slot=3), scen, PredictedScenario.perfect(scen), 3, params)
    assert problem.size == 1
    assert not problem.instance.offload_mask.any()
    with pytest.raises(ModelDomainError):
        build_window_problem(_state(1, 4), scen, PredictedScenario.perfect(scen), 5, params)
    with pytest.raises(ModelDomainError):
        build_window_problem(_state(1, 4), scen, PredictedScenario.perfect(scen), 0, params)


def test_residual_updates():
    state = _state()
    arrivals = np.array([3e5, 4e5])
    drained = update_residuals(state, arrivals, np.zeros(2), 0.0, arrivals)
    np.testing.assert_array_equal(drained.user_residuals, 0.0)
    idle = update_residuals(state, np.zeros(2), np.zeros(2), 0.0, arrivals)
    np.testing.assert_array_equal(idle.user_residuals, arrivals)
    assert idle.slot == 1
    moved = update_residuals(idle, np.array([1e5, 0.0]), np.array([2e5, 1e5]), 0.0, np.zeros(2))
    np.testing.assert_allclose(moved.user_residuals, [0.0, 3e5])
    assert moved.ap_residual == pytest.approx(3e5)
    with pytest.raises(ResidualInvariantError):
        update_residuals(state, np.array([5e5, 0.0]), np.zeros(2), 0.0, arrivals)
    with pytest.raises(ResidualInvariantError):
        update_residuals(moved, np.zeros(2), np.zeros(2), 4e5, np.zeros(2))


def test_residuals_match_recomputation():
    rng = np.random.default_rng(1)
    arrivals = rng.uniform(0, 1e6, (2, 5))
    state = _state(2, 5)
    executed_local, executed_off, executed_mec = [], [], []
    for i in range(5):
        available = state.user_residuals + arrivals[:, i]
        share = rng.uniform(0, 1, (2, 2))
        share = share / np.maximum(share.sum(axis=1, keepdims=True), 1.0)
        local, off = available * share[:, 0], available * share[:, 1]
        mec = state.ap_residual * rng.uniform()
        executed_local.append(local)
        executed_off.append(off)
        executed_mec.append(mec)
        state = update_residuals(state, local, off, mec, arrivals[:, i])
        done = np.sum(executed_local, axis=0) + np.sum(executed_off, axis=0)
        np.testing.assert_allclose(state.user_residuals, np.sum(arrivals[:, :i + 1], axis=1) - done,
                                   rtol=1e-9, atol=1e-6)
        assert state.ap_residual == pytest.approx(np.sum(executed_off) - np.sum(executed_mec), abs=1e-6)


def test_zero_arrivals():
    scen, params, _, _ = make_instance(1, num_users=2, num_slots=3, low=0.0, high=0.0)
    result = solve_sliding_window(scen, None, 2, params)
    assert result.objective == 0.0
    assert not np.any(result.allocation.covariances)


@pytest.mark.parametrize("seed", [4, 9])
def test_window_one_matches_myopic(seed):
    scen, params, _, _ = make_instance(seed, num_users=2, num_slots=3)
    online = solve_sliding_window(scen, None, 1, params, EllipsoidOptions(relative_accuracy=1e-6))
    myopic = solve_myopic(scen, params)
    assert online.objective == pytest.approx(myopic.objective, rel=1e-4)
    np.testing.assert_allclose(online.allocation.mec_bits, myopic.allocation.mec_bits, rtol=1e-3,
                               atol=1e-4 * float(np.max(scen.arrivals)))


def test_full_window_with_perfect_prediction_matches_offline():
    scen, params, _, _ = make_instance(14, num_users=1, num_slots=3)
    online = solve_sliding_window(scen, None, 3, params, carry_energy=True)
    offline = solve_offline(scen, params)
    assert online.objective == pytest.approx(offline.objective, rel=1e-3)
    assert online.feasibility.feasible, online.feasibility.violations()


@pytest.mark.parametrize("seed", [3, 14])
def test_full_window_without_energy_carry_never_beats_offline(seed):
    scen, params, _, _ = make_instance(seed, num_users=2, num_slots=4)
    online = solve_sliding_window(scen, None, 4, params)
    offline = solve_offline(scen, params)
    assert online.feasibility.feasible, online.feasibility.violations()
    assert online.objective >= offline.objective * (1 - 1e-3)
    assert online.logs[0].local_bits == pytest.approx(offline.allocation.local_bits[:, 0], rel=1e-3, abs=1e2)


def test_commitments_use_only_revealed_information():
    scen, params, geom, draw = make_instance(5, num_users=2, num_slots=4)
    pred = gen_predictions(scen, PredictionErrorModel.uniform(0.2), geom, 5, draw)
    rng = np.random.default_rng(0)
    arrivals = scen.arrivals.copy()
    wpt, offload = scen.wpt_channels.copy(), scen.offload_channels.copy()
    arrivals[:, 2:] *= rng.uniform(0.2, 1.8, arrivals[:, 2:].shape)
    wpt[:, 2:] *= 1.5
    offload[:, 2:] *= 0.7
    altered = Scenario(arrivals, wpt, offload)

    first = solve_sliding_window(scen, pred, 3, params)
    second = solve_sliding_window(altered, pred, 3, params)
    for slot in (0, 1):
        a, b = first.allocation, second.allocation
        np.testing.assert_allclose(b.local_bits[:, slot], a.local_bits[:, slot], rtol=1e-9)
        np.testing.assert_allclose(b.offload_bits[:, slot], a.offload_bits[:, slot], rtol=1e-9)
        np.testing.assert_allclose(b.mec_bits[slot], a.mec_bits[slot], rtol=1e-9)
        np.testing.assert_allclose(b.covariances[slot], a.covariances[slot], rtol=1e-9, atol=1e-15)
    assert not np.allclose(second.allocation.local_bits[:, 2:], first.allocation.local_bits[:, 2:])


@pytest.mark.parametrize("mode", [ExecutionMode.JOINT, ExecutionMode.LOCAL_ONLY, ExecutionMode.FULL_OFFLOAD])
def test_online_trajectories_are_feasible(mode):
    scen, params, geom, draw = make_instance(5, num_users=2, num_slots=4)
    pred = gen_predictions(scen, PredictionErrorModel.uniform(0.2), geom, 5, draw)
    result = solve_sliding_window(scen, pred, 2, params, mode=mode)
    assert result.feasibility.feasible, result.feasibility.violations()
    assert isinstance(result.allocation, Allocation)
    assert len(result.logs) == 4
    assert result.logs[-1].ap_residual == pytest.approx(0.0, abs=1e-3)
    np.testing.assert_allclose(result.logs[-1].user_residuals, 0.0, atol=1e-3)
    if mode is ExecutionMode.LOCAL_ONLY:
        assert not np.any(result.allocation.offload_bits)


def test_callable_predictor_sees_every_slot():
    scen, params, _, _ = make_instance(2, num_users=1, num_slots=3)
    seen = []

    def predictor(slot):
        seen.append(slot)
        return PredictedScenario.perfect(scen)

    result = solve_sliding_window(scen, predictor, 2, params)
    assert seen == [0, 1, 2]
    frame = window_log_frame(result.logs)
    assert list(frame["slot"]) == [0, 1, 2]
    assert list(frame["window"]) == [2, 2, 1]
