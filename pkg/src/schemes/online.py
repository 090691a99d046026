"""
Sliding-window online scheduler.

At every slot the scheduler solves a window problem over the next M slots
built from the true information of the current slot, the residual backlogs
and predictions for the rest of the window, commits only the first slot's
decisions and rolls forward.
"""

import logging
import time
from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np
import pandas as pd

from src.components.instance import ExecutionMode, ProblemInstance
from src.components.model import (
    Allocation,
    FeasibilityReport,
    check_feasibility,
    harvested_per_slot,
    total_objective,
    user_energy,
)
from src.components.scenario import PredictedScenario
from src.schemes.offline import solve_instance
from src.utils.config import WPT_TOLERANCE
from src.utils.errors import ModelDomainError, ResidualInvariantError

logger = logging.getLogger(__name__)

RESIDUAL_TOLERANCE = 1e-9


@dataclass
class OnlineState:
    """Scheduler state at the start of a slot; the trajectory holds every committed slot so far."""

    slot: int
    user_residuals: np.ndarray
    ap_residual: float
    energy_credit: np.ndarray
    trajectory: Allocation

    @classmethod
    def initial(cls, num_users, num_slots, num_antennas):
        return cls(0, np.zeros(num_users), 0.0, np.zeros(num_users),
                   Allocation.zeros(num_users, num_slots, num_antennas))


@dataclass
class WindowProblem:
    start: int
    size: int
    instance: ProblemInstance


@dataclass
class WindowLog:
    slot: int
    window: int
    local_bits: np.ndarray
    offload_bits: np.ndarray
    mec_bits: float
    wpt_energy: float
    user_residuals: np.ndarray
    ap_residual: float
    iterations: int
    converged: bool


@dataclass
class OnlineResult:
    allocation: Allocation
    objective: float
    logs: List[WindowLog] = field(default_factory=list)
    feasibility: Optional[FeasibilityReport] = None
    runtime_s: float = 0.0

    @property
    def converged(self):
        return all(log.converged for log in self.logs)


def build_window_problem(state, scen_true, scen_pred, window, params, mode=ExecutionMode.JOINT,
                         carry_energy=False):
    """
    Window problem starting at the current slot.

    The first slot uses the true arrivals plus residual user backlog and the
    true channels; later slots use predictions. The window is truncated at the
    horizon end, where offloading in the last slot is pinned to zero.

    Args:
        state (OnlineState): Current scheduler state
        scen_true (Scenario): Ground truth
        scen_pred (PredictedScenario): Predictions for the whole horizon
        window (int): Window size M, 1 <= M <= N
        params (SystemParams): Full-horizon parameters
        mode (ExecutionMode): Joint design or a restricted scheme
        carry_energy (bool): Offer energy banked in earlier slots to the window

    Returns:
        WindowProblem: Instance with its position in the horizon
    """
    num_slots = params.num_slots
    if not 1 <= window <= num_slots:
        raise ModelDomainError(f"window size must be in [1, {num_slots}], got {window}")
    start = state.slot
    if not 0 <= start < num_slots:
        raise ModelDomainError(f"slot {start} outside the horizon")
    size = min(window, num_slots - start)
    cols = slice(start, start + size)

    arrivals = np.array(scen_pred.arrivals[:, cols], dtype=float)
    wpt = np.array(scen_pred.wpt_channels[:, cols], dtype=complex)
    offload = np.array(scen_pred.offload_channels[:, cols], dtype=complex)
    arrivals[:, 0] = state.user_residuals + scen_true.arrivals[:, start]
    wpt[:, 0] = scen_true.wpt_channels[:, start]
    offload[:, 0] = scen_true.offload_channels[:, start]

    instance = ProblemInstance.build(
        params.with_slots(size),
        arrivals,
        wpt,
        offload,
        ap_backlog=state.ap_residual,
        energy_credit=state.energy_credit if carry_energy else None,
        pin_first_mec=start == 0,
        pin_last_offload=start + size == num_slots,
        mode=mode,
    )
    return WindowProblem(start, size, instance)


def _checked(value, scale, what):
    if value < -RESIDUAL_TOLERANCE * max(1.0, scale):
        raise ResidualInvariantError(f"{what} would become negative ({value:.6g})")
    return max(0.0, value)


def update_residuals(state, local_bits, offload_bits, mec_bits, arrivals, energy_surplus=None):
    """
    Roll the state forward by one committed slot.

    Args:
        state (OnlineState): State before the slot
        local_bits (numpy.ndarray): Committed local bits, shape (K,)
        offload_bits (numpy.ndarray): Committed offloaded bits, shape (K,)
        mec_bits (float): Committed AP bits
        arrivals (numpy.ndarray): True arrivals of the slot, shape (K,)
        energy_surplus (numpy.ndarray, optional): Harvested minus consumed energy, added to the credit

    Returns:
        OnlineState: State at the start of the next slot
    """
    local_bits = np.asarray(local_bits, dtype=float)
    offload_bits = np.asarray(offload_bits, dtype=float)
    available = state.user_residuals + np.asarray(arrivals, dtype=float)
    residuals = np.array([
        _checked(available[k] - local_bits[k] - offload_bits[k], available[k], f"residual of user {k}")
        for k in range(available.size)
    ])
    ap_residual = _checked(state.ap_residual - float(mec_bits), state.ap_residual, "AP residual")
    ap_residual += float(np.sum(offload_bits))

    credit = state.energy_credit
    if energy_surplus is not None:
        credit = np.clip(credit + np.asarray(energy_surplus, dtype=float), 0.0, None)
    return replace(state, slot=state.slot + 1, user_residuals=residuals, ap_residual=ap_residual,
                   energy_credit=credit)


def _prediction_at(predictor, slot):
    if callable(predictor):
        prediction = predictor(slot)
    else:
        prediction = predictor
    if not isinstance(prediction, PredictedScenario):
        raise ModelDomainError("predictor must provide a PredictedScenario")
    return prediction


def solve_sliding_window(scen_true, predictor, window, params, opts=None, mode=ExecutionMode.JOINT,
                         carry_energy=False, wpt_tolerance=WPT_TOLERANCE):
    """
    Online schedule over the whole horizon.

    Args:
        scen_true (Scenario): Ground truth revealed slot by slot
        predictor (PredictedScenario | callable | None): Predictions, a function slot -> PredictedScenario,
            or None for perfect predictions
        window (int): Window size M
        params (SystemParams): System parameters
        opts (EllipsoidOptions, optional): Ellipsoid settings for every window
        mode (ExecutionMode): Joint design or a restricted scheme
        carry_energy (bool): Let surplus harvested energy be used in later slots
        wpt_tolerance (float): Relative gap tolerance of the covariance design

    Returns:
        OnlineResult: Committed trajectory, its objective and per-slot logs
    """
    start_time = time.perf_counter()
    scen_true.check_params(params)
    if predictor is None:
        predictor = PredictedScenario.perfect(scen_true)
    num_users, num_slots, num_antennas = scen_true.wpt_channels.shape
    state = OnlineState.initial(num_users, num_slots, num_antennas)
    logs = []

    for i in range(num_slots):
        problem = build_window_problem(state, scen_true, _prediction_at(predictor, i), window, params,
                                       mode, carry_energy)
        sol = solve_instance(problem.instance, opts, wpt_tolerance)
        local, offload, mec = sol.local_bits[:, 0], sol.offload_bits[:, 0], float(sol.mec_bits[0])
        covariance = sol.covariances[0]

        trajectory = state.trajectory
        trajectory.covariances[i] = covariance
        trajectory.local_bits[:, i] = local
        trajectory.offload_bits[:, i] = offload
        trajectory.mec_bits[i] = mec

        surplus = None
        if carry_energy:
            harvested = harvested_per_slot(covariance[None], scen_true.wpt_channels[:, i:i + 1], params)[:, 0]
            consumed = user_energy(local[:, None], offload[:, None], scen_true.offload_gains[:, i:i + 1],
                                   params)[:, 0]
            surplus = harvested - consumed
        state = update_residuals(state, local, offload, mec, scen_true.arrivals[:, i], surplus)

        logs.append(WindowLog(
            slot=i,
            window=problem.size,
            local_bits=local.copy(),
            offload_bits=offload.copy(),
            mec_bits=mec,
            wpt_energy=params.slot_duration * float(np.real(np.trace(covariance))),
            user_residuals=state.user_residuals.copy(),
            ap_residual=state.ap_residual,
            iterations=sol.ellipsoid.iterations,
            converged=sol.converged,
        ))
        logger.debug("Slot %d committed: window=%d AP residual=%.6g bits", i, problem.size, state.ap_residual)

    alloc = state.trajectory
    objective = total_objective(alloc, params)
    feasibility = check_feasibility(alloc, scen_true, params)
    if not feasibility.feasible:
        logger.warning("Online trajectory violates constraints: %s", feasibility.violations())
    logger.info("Online %s solve: K=%d N=%d M=%d objective=%.6g J", mode.value, num_users, num_slots, window,
                objective)
    return OnlineResult(alloc, objective, logs, feasibility, time.perf_counter() - start_time)


def window_log_frame(logs):
    """One row per committed slot, bits summed over users."""
    return pd.DataFrame(
        [
            {
                "slot": log.slot,
                "window": log.window,
                "local_bits": float(np.sum(log.local_bits)),
                "offload_bits": float(np.sum(log.offload_bits)),
                "mec_bits": log.mec_bits,
                "energy_J": log.wpt_energy,
                "residual_bits": float(np.sum(log.user_residuals)),
                "ap_residual_bits": log.ap_residual,
                "iterations": log.iterations,
                "converged": log.converged,
            }
            for log in logs
        ],
        columns=["slot", "window", "local_bits", "offload_bits", "mec_bits", "energy_J", "residual_bits",
                 "ap_residual_bits", "iterations", "converged"],
    )
