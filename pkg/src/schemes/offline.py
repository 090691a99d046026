"""
Offline scheduler for the wireless powered MEC system.

This module runs the full pipeline on a problem instance: maximize the dual
function, read the bit allocation off the closed-form minimizers at the best
multipliers, fall back to the joint conic program when those bits miss the
task constraints or the dual bound, and design the transmit covariances for
the induced energy demands. It also exposes the single-user structure (power
only at causality-dominating slots) and the monotonicity check on offline
solutions.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from src.components.dual_solver import (
    BitCandidates,
    DualVariables,
    EllipsoidOptions,
    EllipsoidResult,
    ellipsoid_maximize,
)
from src.components.instance import ExecutionMode, ProblemInstance
from src.components.model import (
    Allocation,
    FeasibilityReport,
    check_feasibility,
    local_energy,
    offload_energy_from_gain,
    total_objective,
)
from src.components.primal_program import solve_primal_program
from src.components.wpt_beamforming import EnergyDemandProfile, WptSolution, min_power_wpt, mrc_covariance
from src.utils.config import REPAIR_TOLERANCE, WPT_TOLERANCE
from src.utils.errors import InfeasibleProblemError, ModelDomainError

logger = logging.getLogger(__name__)


@dataclass
class SolveDiagnostics:
    iterations: int = 0
    converged: bool = True
    message: str = ""
    wpt_gap: float = 0.0
    wpt_converged: bool = True
    repaired_bits: float = 0.0
    runtime_s: float = 0.0
    feasibility: Optional[FeasibilityReport] = None
    recovery: str = ""


@dataclass
class OfflineSolution:
    """Allocation with its objective, the dual bound and the gap between them."""

    allocation: Allocation
    objective: float
    dual_value: float
    duality_gap: float
    dual: Optional[DualVariables]
    diagnostics: SolveDiagnostics = field(default_factory=SolveDiagnostics)


@dataclass
class InstanceSolution:
    """
    Schedule of one instance with its dual bound.

    converged holds only when the ellipsoid certified its dual value and the
    schedule's objective lies within gap_tolerance of it.
    """

    local_bits: np.ndarray
    offload_bits: np.ndarray
    mec_bits: np.ndarray
    covariances: np.ndarray
    objective: float
    dual_value: float
    ellipsoid: EllipsoidResult
    wpt: WptSolution
    repaired_bits: float
    recovery: str = "closed form"
    gap_tolerance: float = 0.0

    @property
    def duality_gap(self):
        return self.objective - self.dual_value

    @property
    def converged(self):
        return self.ellipsoid.converged and self.duality_gap <= self.gap_tolerance

    @property
    def message(self):
        if self.ellipsoid.converged and not self.converged:
            return f"duality gap {self.duality_gap:.6g} J above tolerance {self.gap_tolerance:.3g} J"
        return self.ellipsoid.message


@dataclass
class SingleUserStructure:
    """Dominating slot per slot, interval length per dominating slot (0 elsewhere) and powers in watts."""

    dominating_index: np.ndarray
    interval_lengths: np.ndarray
    powers: np.ndarray


@dataclass
class MonotonicityReport:
    passed: bool
    local_violations: List[tuple]
    mec_violations: List[int]
    worst_violation: float
    tolerance: float


def recover_bits(candidates, instance):
    """
    Make a near-feasible bit allocation exactly task-feasible.

    Execution is capped slot by slot at the available backlog, and whatever is
    left at the end of the horizon is executed in the last slot (locally when
    allowed, otherwise offloaded). The AP side is handled the same way. Large
    moves distort the schedule; solve_instance only keeps repaired closed-form
    bits when the move is negligible.

    Args:
        candidates (BitCandidates): Minimizers at the best multipliers
        instance (ProblemInstance): Problem instance

    Returns:
        tuple: (local_bits, offload_bits, mec_bits, bits moved by the repair)
    """
    local = np.where(instance.local_mask, candidates.local_bits, 0.0)
    offload = np.where(instance.offload_mask, candidates.offload_bits, 0.0)
    mec = np.where(instance.mec_mask, candidates.mec_bits, 0.0)
    moved = 0.0
    num_users, num_slots = instance.num_users, instance.num_slots
    last = num_slots - 1

    for k in range(num_users):
        available = 0.0
        for i in range(num_slots):
            available += instance.arrivals[k, i]
            executed = local[k, i] + offload[k, i]
            if executed > available:
                ratio = available / executed
                moved += executed - available
                local[k, i] *= ratio
                offload[k, i] *= ratio
            available = max(0.0, available - local[k, i] - offload[k, i])
        if available > 0:
            moved += available
            if instance.local_mask[k, last]:
                local[k, last] += available
            elif instance.offload_mask[k, last]:
                offload[k, last] += available
            else:
                raise InfeasibleProblemError(f"user {k} cannot execute its bits in the last slot")

    backlog = instance.ap_backlog
    for i in range(num_slots):
        if i > 0:
            backlog += float(np.sum(offload[:, i - 1]))
        if mec[i] > backlog:
            moved += mec[i] - backlog
            mec[i] = backlog
        backlog = max(0.0, backlog - mec[i])
    if backlog > 0:
        if not instance.mec_mask[last]:
            raise InfeasibleProblemError("AP backlog cannot be executed in the last slot")
        moved += backlog
        mec[last] += backlog
    return local, offload, mec, moved


def gap_tolerance(objective, ellipsoid, relative_accuracy, wpt_tolerance=WPT_TOLERANCE):
    """
    Largest objective - dual value a certified schedule may show.

    Args:
        objective (float): Primal objective in joules
        ellipsoid (EllipsoidResult): Run that produced the dual bound
        relative_accuracy (float): Relative accuracy of the run
        wpt_tolerance (float): Relative tolerance of the conic solves

    Returns:
        float: Joules
    """
    base = relative_accuracy * (1.0 + objective)
    if ellipsoid.target_accuracy > 0:
        base = max(base, ellipsoid.target_accuracy)
    return base + wpt_tolerance * objective


def _schedule(local, offload, mec, instance, wpt_tolerance):
    demands = EnergyDemandProfile.from_bits(local, offload, instance.offload_gains, instance.params,
                                            instance.energy_credit)
    wpt = min_power_wpt(demands, instance.wpt_channels, instance.params, wpt_tolerance)
    return wpt, wpt.total_energy + float(np.sum(instance.mec_energy(mec)))


def solve_instance(instance, opts=None, wpt_tolerance=WPT_TOLERANCE):
    """
    Solve a problem instance: dual maximization, primal recovery, covariance design.

    The closed-form bits at the best multipliers are kept when they need no
    more than a negligible repair and their objective meets the dual bound.
    Otherwise the joint conic program supplies the bits.

    Args:
        instance (ProblemInstance): Problem instance
        opts (EllipsoidOptions, optional): Ellipsoid settings
        wpt_tolerance (float): Relative gap tolerance of the covariance design

    Returns:
        InstanceSolution: Feasible schedule with its dual bound
    """
    opts = opts or EllipsoidOptions()
    result = ellipsoid_maximize(instance, opts)
    total_bits = max(1.0, float(np.sum(instance.arrivals)) + instance.ap_backlog)

    local, offload, mec, moved = recover_bits(result.candidates, instance)
    wpt, objective = _schedule(local, offload, mec, instance, wpt_tolerance)
    tolerance = gap_tolerance(objective, result, opts.relative_accuracy, wpt_tolerance)
    recovery = "closed form"

    if moved > REPAIR_TOLERANCE * total_bits or objective - result.dual_value > tolerance:
        logger.debug("Closed-form bits need %.3g repaired bits and leave a %.3g J gap, solving the primal program",
                     moved, objective - result.dual_value)
        program = solve_primal_program(instance)
        if program is not None:
            bits = recover_bits(BitCandidates(program.local_bits, program.offload_bits, program.mec_bits), instance)
            program_wpt, program_objective = _schedule(*bits[:3], instance, wpt_tolerance)
            if program_objective <= objective or moved > REPAIR_TOLERANCE * total_bits:
                local, offload, mec, moved = bits
                wpt, objective = program_wpt, program_objective
                tolerance = gap_tolerance(objective, result, opts.relative_accuracy, wpt_tolerance)
                recovery = "primal program"
        else:
            recovery = "repaired closed form"

    sol = InstanceSolution(local, offload, mec, wpt.covariances, objective, result.dual_value, result, wpt,
                           moved, recovery, tolerance)
    if not sol.converged:
        logger.warning("Instance solve not certified (K=%d M=%d): %s", instance.num_users, instance.num_slots,
                       sol.message)
    return sol


def solve_offline(scen, params, opts=None, wpt_tolerance=WPT_TOLERANCE, mode=ExecutionMode.JOINT):
    """
    Optimal offline schedule with task and channel information known in advance.

    Args:
        scen (Scenario): Ground-truth scenario
        params (SystemParams): System parameters
        opts (EllipsoidOptions, optional): Ellipsoid settings
        wpt_tolerance (float): Relative gap tolerance of the covariance design
        mode (ExecutionMode): Joint design or a restricted scheme

    Returns:
        OfflineSolution: Certified schedule
    """
    start = time.perf_counter()
    instance = ProblemInstance.offline(scen, params, mode)
    sol = solve_instance(instance, opts, wpt_tolerance)
    alloc = Allocation(sol.covariances, sol.mec_bits, sol.local_bits, sol.offload_bits)
    objective = total_objective(alloc, params)
    diagnostics = SolveDiagnostics(
        iterations=sol.ellipsoid.iterations,
        converged=sol.converged,
        message=sol.message,
        wpt_gap=sol.wpt.gap,
        wpt_converged=sol.wpt.converged,
        repaired_bits=sol.repaired_bits,
        runtime_s=time.perf_counter() - start,
        feasibility=check_feasibility(alloc, scen, params),
        recovery=sol.recovery,
    )
    logger.info(
        "Offline %s solve: K=%d N=%d objective=%.6g J dual=%.6g J iterations=%d recovery=%s converged=%s",
        mode.value, params.num_users, params.num_slots, objective, sol.dual_value,
        diagnostics.iterations, sol.recovery, diagnostics.converged,
    )
    return OfflineSolution(alloc, objective, sol.dual_value, objective - sol.dual_value, sol.ellipsoid.dual,
                           diagnostics)


def causality_dominating_slots(h_sequence):
    """
    Running argmax of the WPT channel gain, earliest slot winning ties.

    Args:
        h_sequence (numpy.ndarray): Channel vectors of shape (N, N_t), or per-slot norms of shape (N,)

    Returns:
        numpy.ndarray: Dominating slot index (0-based) for every slot
    """
    values = np.asarray(h_sequence)
    if values.size == 0:
        raise ModelDomainError("channel sequence must be nonempty")
    gains = np.abs(values) if values.ndim == 1 else np.sum(np.abs(values) ** 2, axis=-1)
    dominating = np.empty(gains.shape[0], dtype=int)
    best = 0
    for i, gain in enumerate(gains):
        if gain > gains[best]:
            best = i
        dominating[i] = best
    return dominating


def _single_user_arrays(local_bits, offload_bits, wpt_channels, offload_channels, params):
    if params.num_users != 1:
        raise ModelDomainError("single-user recovery needs K = 1")
    local = np.asarray(local_bits, dtype=float).reshape(-1)
    offload = np.asarray(offload_bits, dtype=float).reshape(-1)
    wpt = np.asarray(wpt_channels, dtype=complex).reshape(local.size, -1)
    off_channels = np.asarray(offload_channels, dtype=complex).reshape(local.size, -1)
    return local, offload, wpt, off_channels


def single_user_structure(local_bits, offload_bits, wpt_channels, offload_channels, params):
    """
    Dominating slots, interval lengths and MRC powers of the single-user optimum.

    Each dominating slot pays for all demand from itself up to the slot before
    the next dominating slot.
    """
    local, offload, wpt, off_channels = _single_user_arrays(local_bits, offload_bits, wpt_channels,
                                                            offload_channels, params)
    tau = params.slot_duration
    eta = float(params.harvest_efficiency[0])
    demand = local_energy(local, params.user_capacitance[0], params.user_cycles_per_bit[0], tau)
    demand = demand + offload_energy_from_gain(offload, np.sum(np.abs(off_channels) ** 2, axis=-1),
                                               params.noise_power, params.bandwidth, tau, params.snr_penalty)
    dominating = causality_dominating_slots(wpt)
    gains = np.sum(np.abs(wpt) ** 2, axis=-1)
    starts = np.flatnonzero(dominating == np.arange(dominating.size))
    ends = np.append(starts[1:], dominating.size)
    lengths = np.zeros(dominating.size, dtype=int)
    powers = np.zeros(dominating.size)
    for start, end in zip(starts, ends):
        lengths[start] = end - start
        powers[start] = float(np.sum(demand[start:end])) / (tau * eta * gains[start])
    return SingleUserStructure(dominating, lengths, powers)


def recover_single_user_wpt(local_bits, offload_bits, wpt_channels, offload_channels, params):
    """
    MRC covariances for a single user, transmitting only at causality-dominating slots.

    Args:
        local_bits (numpy.ndarray): Local bits per slot
        offload_bits (numpy.ndarray): Offloaded bits per slot
        wpt_channels (numpy.ndarray): WPT channels, shape (N, N_t) or (1, N, N_t)
        offload_channels (numpy.ndarray): Offloading channels, same shape
        params (SystemParams): System parameters with K = 1

    Returns:
        tuple: (covariances of shape (N, N_t, N_t), powers of shape (N,))
    """
    structure = single_user_structure(local_bits, offload_bits, wpt_channels, offload_channels, params)
    wpt = np.asarray(wpt_channels, dtype=complex).reshape(structure.powers.size, -1)
    covariances = np.stack([mrc_covariance(wpt[i], structure.powers[i]) for i in range(wpt.shape[0])])
    return covariances, structure.powers


def verify_monotonicity(alloc, tol=None):
    """
    Check that local bits and AP bits (from the second slot on) never decrease over time.

    Args:
        alloc (Allocation): Allocation to check
        tol (float, optional): Absolute slack, default 1e-6 times the largest bit value

    Returns:
        MonotonicityReport: Violating (user, slot) pairs and AP slots
    """
    local = np.asarray(alloc.local_bits, dtype=float)
    mec = np.asarray(alloc.mec_bits, dtype=float)
    if tol is None:
        tol = 1e-6 * max(float(np.max(local, initial=0.0)), float(np.max(mec, initial=0.0)), 1.0)
    local_drop = local[:, :-1] - local[:, 1:]
    mec_drop = mec[1:-1] - mec[2:]
    local_violations = [(int(k), int(i)) for k, i in zip(*np.nonzero(local_drop > tol))]
    mec_violations = [int(i) + 1 for i in np.flatnonzero(mec_drop > tol)]
    worst = max(float(np.max(local_drop, initial=0.0)), float(np.max(mec_drop, initial=0.0)), 0.0)
    return MonotonicityReport(not local_violations and not mec_violations, local_violations, mec_violations,
                              worst, float(tol))
