import time

import numpy as np
import pytest

from src.components.dual_solver import (
    BitCandidates,
    DualVariables,
    EllipsoidOptions,
    candidate_residual,
    coordinate_radii,
    dual_function,
    dual_subgradient,
    ellipsoid_maximize,
    ellipsoid_step,
    feasibility_cut,
    iteration_log_frame,
    log_volume_decrement,
    solve_loc_subproblem,
    solve_mec_subproblem,
    solve_off_subproblem,
    solve_off_subproblem_from_gain,
)
from src.components.instance import ExecutionMode, ProblemInstance
from src.components.model import Allocation, check_feasibility, local_energy, total_objective, user_energy
from src.components.wpt_beamforming import EnergyDemandProfile, min_power_wpt
from src.utils.errors import InfeasibleProblemError, ModelDomainError, TrialTimeoutError
from tests.conftest import make_instance


def test_mec_subproblem():
    bits = solve_mec_subproblem(np.array([0.5, -3.0]), 1.0 / 3.0, 1.0, 1.0, pin_first=False)
    np.testing.assert_allclose(bits, [0.0, np.sqrt(3.0)])
    pinned = solve_mec_subproblem(np.array([-3.0, -3.0]), 1.0 / 3.0, 1.0, 1.0)
    assert pinned[0] == 0.0


def test_loc_subproblem():
    assert solve_loc_subproblem(3.0, -3.0, 1.0 / 3.0, 1.0, 1.0) == pytest.approx(1.0)
    assert solve_loc_subproblem(3.0, 0.5, 1.0 / 3.0, 1.0, 1.0) == 0.0
    scaled = solve_loc_subproblem(7.5, -7.5, 1.0 / 3.0, 1.0, 1.0)
    assert scaled == pytest.approx(1.0)
    with pytest.raises(ModelDomainError):
        solve_loc_subproblem(0.0, -1.0, 1.0, 1.0, 1.0)


def test_off_subproblem():
    noise = 1.0 / np.log(2.0)
    assert solve_off_subproblem_from_gain(1.0, 0.0, 4.0, 1.0, noise, 1.0, 1.0) == pytest.approx(2.0)
    assert solve_off_subproblem_from_gain(1.0, 2.0, 2.0, 1.0, noise, 1.0, 1.0) == 0.0
    assert solve_off_subproblem(1.0, 0.0, 4.0, np.array([1.0, 0.0]), noise, 1.0, 1.0) == pytest.approx(2.0)


def _instance(seed=3, num_users=2, num_slots=3):
    scen, params, _, _ = make_instance(seed, num_users=num_users, num_slots=num_slots)
    return ProblemInstance.offline(scen, params), scen, params


def test_dual_function_with_vanishing_multipliers():
    instance, _, _ = _instance()
    dv = DualVariables.zeros(2, 3)
    dv.lam[:, -1] = 1e-12
    value, cand = dual_function(dv, instance)
    assert value == 0.0
    assert not np.any(cand.local_bits) and not np.any(cand.offload_bits) and not np.any(cand.mec_bits)


def test_subgradient_with_zero_candidates():
    instance, scen, _ = _instance()
    dv = DualVariables.zeros(2, 3)
    dv.lam[:, -1] = 1e-12
    _, cand = dual_function(dv, instance)
    g = dual_subgradient(dv, cand, instance)
    mu_block = g[6:12].reshape(2, 3)
    np.testing.assert_allclose(mu_block, -np.cumsum(scen.arrivals, axis=1))
    np.testing.assert_allclose(g[:6], 0.0)


def test_no_cut_for_tiny_multipliers():
    instance, _, _ = _instance()
    dv = DualVariables.zeros(2, 3)
    dv.lam[:, -1] = 1e-12
    assert feasibility_cut(dv, instance, lambda_floor=1e-15) is None


def test_sign_cut():
    instance, _, _ = _instance()
    dv = DualVariables.zeros(2, 3)
    dv.lam[:, -1] = 1e-12
    dv.mu[1, 0] = -1.0
    cut = feasibility_cut(dv, instance, lambda_floor=1e-15)
    assert cut.kind == "sign"
    assert cut.index == 6 + 3
    assert cut.normal[cut.index] == -1.0


def test_floor_cut():
    instance, _, _ = _instance()
    dv = DualVariables.zeros(2, 3)
    cut = feasibility_cut(dv, instance, lambda_floor=1e-15)
    assert cut.kind == "floor"


def test_psd_cut_separates():
    instance, _, _ = _instance()
    dv = DualVariables.zeros(2, 3)
    dv.lam[:] = 1e6
    cut = feasibility_cut(dv, instance, lambda_floor=1e-15)
    assert cut.kind == "psd"
    feasible = DualVariables.zeros(2, 3)
    feasible.lam[:, -1] = 1e-12
    assert feasibility_cut(feasible, instance, lambda_floor=1e-15) is None
    assert cut.normal @ feasible.to_vector() < cut.normal @ dv.to_vector()


def test_ellipsoid_step_volume():
    n = 5
    center = np.zeros(n)
    shape = 2.0 * np.eye(n)
    new_center, new_shape = ellipsoid_step(center, shape, np.arange(1.0, n + 1.0))
    assert new_center @ np.arange(1.0, n + 1.0) < 0
    change = 0.5 * (np.linalg.slogdet(new_shape)[1] - np.linalg.slogdet(shape)[1])
    assert change == pytest.approx(log_volume_decrement(n))
    assert ellipsoid_step(center, shape, np.zeros(n)) is None


def test_single_slot_dual_optimum():
    scen, params, _, _ = make_instance(4, num_users=1, num_slots=1)
    instance = ProblemInstance.offline(scen, params)
    result = ellipsoid_maximize(instance, EllipsoidOptions())
    arrival = scen.arrivals[0, 0]
    expected = local_energy(arrival, 1e-28, 1e3, 0.02) / (0.3 * scen.wpt_gains[0, 0])
    assert result.dual_value == pytest.approx(expected, rel=1e-3)
    assert result.dual_value <= expected * (1 + 1e-9)


def test_zero_arrivals_short_circuit():
    scen, params, _, _ = make_instance(4, num_users=2, num_slots=2, low=0.0, high=0.0)
    result = ellipsoid_maximize(ProblemInstance.offline(scen, params))
    assert result.dual_value == 0.0
    assert result.converged
    assert not np.any(result.candidates.local_bits)


def test_iteration_log():
    instance, _, _ = _instance(num_users=1, num_slots=2)
    result = ellipsoid_maximize(instance)
    frame = iteration_log_frame(result.log)
    assert list(frame.columns) == ["iter", "dual_value", "gap_bound", "cut_type"]
    assert len(frame) == result.iterations
    assert set(frame["cut_type"]) <= {"sign", "floor", "psd", "objective"}


def test_instance_masks():
    scen, params, _, _ = make_instance(2, num_users=2, num_slots=3)
    joint = ProblemInstance.offline(scen, params)
    assert not joint.offload_mask[:, -1].any() and joint.offload_mask[:, :-1].all()
    assert not joint.mec_mask[0] and joint.mec_mask[1:].all()
    local = ProblemInstance.offline(scen, params, ExecutionMode.LOCAL_ONLY)
    assert not local.offload_mask.any() and not local.mec_mask.any()
    full = ProblemInstance.offline(scen, params, ExecutionMode.FULL_OFFLOAD)
    np.testing.assert_array_equal(full.local_mask, ~full.offload_mask)
    with pytest.raises(InfeasibleProblemError):
        ProblemInstance.build(params, scen.arrivals, scen.wpt_channels, scen.offload_channels, ap_backlog=1.0,
                              mode=ExecutionMode.LOCAL_ONLY)
    assert joint.dimension == 2 * 2 * 3 + 3


def _points_near_optimum(instance, seed=0, count=3):
    """Dual-feasible points: the ellipsoid optimum and random shrinks of its multipliers."""
    rng = np.random.default_rng(seed)
    best = ellipsoid_maximize(instance).dual
    points = [best]
    for _ in range(count):
        points.append(DualVariables(
            best.lam * rng.uniform(0.5, 1.0, best.lam.shape),
            best.mu * rng.uniform(0.5, 1.5, best.mu.shape),
            best.nu * rng.uniform(0.5, 1.5, best.nu.shape),
        ))
    return points


def _random_feasible_allocation(scen, params, rng):
    """Arrivals split at random between local and offloading, a random share deferred one slot."""
    num_users, num_slots = scen.num_users, scen.num_slots
    alloc = Allocation.zeros(num_users, num_slots, scen.num_antennas)
    carried = np.zeros(num_users)
    for i in range(num_slots):
        due = carried + scen.arrivals[:, i]
        now = due if i == num_slots - 1 else due * rng.uniform(0.3, 1.0, num_users)
        share = 0.0 if i == num_slots - 1 else rng.uniform(0.0, 0.2, num_users)
        alloc.offload_bits[:, i] = now * share
        alloc.local_bits[:, i] = now - alloc.offload_bits[:, i]
        carried = due - now
    alloc.mec_bits[1:] = np.sum(alloc.offload_bits[:, :-1], axis=0)
    energies = user_energy(alloc.local_bits, alloc.offload_bits, scen.offload_gains, params)
    alloc.covariances[:] = min_power_wpt(EnergyDemandProfile.from_slot_energies(energies), scen.wpt_channels,
                                         params).covariances
    return alloc


@pytest.mark.parametrize("seed", [2, 5])
def test_weak_duality_against_random_schedules(seed):
    instance, scen, params = _instance(seed)
    rng = np.random.default_rng(seed)
    values = [dual_function(dv, instance)[0] for dv in _points_near_optimum(instance, seed)]
    for _ in range(5):
        alloc = _random_feasible_allocation(scen, params, rng)
        assert check_feasibility(alloc, scen, params).feasible
        objective = total_objective(alloc, params)
        assert max(values) <= objective * (1 + 1e-9)


def test_dual_function_is_concave_along_segments():
    instance, _, _ = _instance(7)
    points = _points_near_optimum(instance, 7)
    for a, b in zip(points, points[1:]):
        fa, fb = dual_function(a, instance)[0], dual_function(b, instance)[0]
        middle = DualVariables((a.lam + b.lam) / 2, (a.mu + b.mu) / 2, (a.nu + b.nu) / 2)
        fm = dual_function(middle, instance)[0]
        assert fm >= (fa + fb) / 2 - 1e-9 * max(abs(fa), abs(fb))


def test_subgradient_bounds_the_dual_function():
    instance, _, _ = _instance(7)
    points = _points_near_optimum(instance, 11)
    for a in points:
        fa, cand = dual_function(a, instance)
        g = dual_subgradient(a, cand, instance)
        for b in points:
            fb = dual_function(b, instance)[0]
            assert fb <= fa + g @ (b.to_vector() - a.to_vector()) + 1e-9 * max(abs(fa), abs(fb))


def test_subgradient_matches_finite_differences():
    instance, _, _ = _instance(7)
    dv = _points_near_optimum(instance, 3, count=0)[0]
    _, cand = dual_function(dv, instance)
    g = dual_subgradient(dv, cand, instance)
    x = dv.to_vector()
    block = instance.num_users * instance.num_slots
    scale = float(np.max(np.abs(x[block:]))) or 1.0
    for index in (block + 1, 2 * block + 1):
        step = np.zeros_like(x)
        step[index] = 1e-6 * scale
        up = dual_function(DualVariables.from_vector(x + step, 2, 3), instance)[0]
        down = dual_function(DualVariables.from_vector(x - step, 2, 3), instance)[0]
        slope = (up - down) / (2 * step[index])
        assert slope == pytest.approx(g[index], rel=1e-3, abs=1e-6 * float(np.sum(instance.arrivals)))


def test_closed_forms_are_stationary():
    instance, _, params = _instance(7)
    dv = _points_near_optimum(instance, 3, count=0)[0]
    _, cand = dual_function(dv, instance)
    tails = dv.tail_sums()
    tau = params.slot_duration
    zeta, cycles = params.user_capacitance[:, None], params.user_cycles_per_bit[:, None]

    local_slope = 3 * tails.lam * zeta * cycles ** 3 * cand.local_bits ** 2 / tau ** 2 + tails.mu
    positive = instance.local_mask & (cand.local_bits > 0)
    np.testing.assert_allclose(local_slope[positive], 0.0, atol=1e-9 * float(np.max(np.abs(tails.mu))))
    assert np.all(tails.mu[instance.local_mask & ~positive] >= 0)

    marginal = (tails.lam * params.noise_power * np.log(2.0) * np.exp2(cand.offload_bits / (tau * params.bandwidth))
                / (params.bandwidth * instance.offload_gains))
    offload_slope = marginal + tails.mu - tails.nu_next()[None, :]
    positive = instance.offload_mask & (cand.offload_bits > 0)
    reference = float(np.max(np.abs(tails.mu))) + float(np.max(np.abs(tails.nu)))
    np.testing.assert_allclose(offload_slope[positive], 0.0, atol=1e-9 * reference)
    assert np.all(offload_slope[instance.offload_mask & ~positive] >= -1e-9 * reference)

    mec_slope = 3 * params.ap_capacitance * params.ap_cycles_per_bit ** 3 * cand.mec_bits ** 2 / tau ** 2 + tails.nu
    positive = instance.mec_mask & (cand.mec_bits > 0)
    np.testing.assert_allclose(mec_slope[positive], 0.0, atol=1e-9 * float(np.max(np.abs(tails.nu))))


@pytest.mark.parametrize("num_users,num_slots", [(1, 2), (2, 3)])
def test_iterations_within_ellipsoid_bound(num_users, num_slots):
    instance, _, _ = _instance(5, num_users, num_slots)
    opts = EllipsoidOptions()
    result = ellipsoid_maximize(instance, opts)
    assert result.converged
    n = instance.dimension
    radius = np.sqrt(n) * opts.initial_radius * float(np.linalg.norm(coordinate_radii(instance)))
    ceiling = 2 * n ** 2 * np.log(radius * result.lipschitz_estimate / result.target_accuracy)
    assert result.iterations <= ceiling + opts.stagnation_window


def test_candidate_residual():
    instance, scen, _ = _instance()
    zeros = np.zeros_like(scen.arrivals)
    exact = BitCandidates(scen.arrivals.copy(), zeros, np.zeros(scen.num_slots))
    assert candidate_residual(exact, instance) == 0.0
    doubled = BitCandidates(2 * scen.arrivals, zeros, np.zeros(scen.num_slots))
    assert candidate_residual(doubled, instance) > 0.1


def test_deadline_aborts_the_run():
    instance, _, _ = _instance()
    with pytest.raises(TrialTimeoutError):
        ellipsoid_maximize(instance, EllipsoidOptions(deadline=time.monotonic() - 1.0))
