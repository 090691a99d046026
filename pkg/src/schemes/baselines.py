"""
Benchmark schemes: myopic design, local computing only, and full offloading.
"""

import logging
import time
from enum import Enum

import numpy as np
from scipy.optimize import brentq

from src.components.instance import ExecutionMode
from src.components.model import (
    Allocation,
    check_feasibility,
    local_energy,
    offload_energy_from_gain,
    total_objective,
    user_energy,
)
from src.components.wpt_beamforming import EnergyDemandProfile, min_power_wpt
from src.schemes.offline import OfflineSolution, SolveDiagnostics, solve_offline
from src.utils.config import WPT_TOLERANCE
from src.utils.errors import InfeasibleProblemError, ModelDomainError

logger = logging.getLogger(__name__)

MAX_EXPONENT = 1000.0


class BaselineKind(Enum):
    LOCAL_ONLY = "local-only"
    FULL_OFFLOAD = "full-offload"
    MYOPIC = "myopic"


def myopic_energy(offload_bits, arrival, gain, params, user=0):
    """User energy of finishing `arrival` bits in one slot with `offload_bits` offloaded."""
    tau = params.slot_duration
    local = local_energy(max(arrival - offload_bits, 0.0), params.user_capacitance[user],
                         params.user_cycles_per_bit[user], tau)
    return float(local + offload_energy_from_gain(offload_bits, gain, params.noise_power, params.bandwidth, tau,
                                                  params.snr_penalty))


def myopic_derivative(offload_bits, arrival, gain, params, user=0):
    """Derivative of myopic_energy in the offloaded bits."""
    tau = params.slot_duration
    zeta, cycles = params.user_capacitance[user], params.user_cycles_per_bit[user]
    local_part = 3.0 * zeta * cycles ** 3 * (arrival - offload_bits) ** 2 / tau ** 2
    exponent = min(offload_bits / (tau * params.bandwidth), MAX_EXPONENT)
    offload_part = params.snr_penalty * params.noise_power * np.log(2.0) * np.exp2(exponent) / (
        params.bandwidth * gain)
    return float(offload_part - local_part)


def myopic_offload_split(arrival, channel, params, user=0):
    """
    Split one slot's arrivals between offloading and local computing at minimum user energy.

    Args:
        arrival (float): Bits that must be finished in the slot
        channel (numpy.ndarray): Offloading channel vector of the user
        params (SystemParams): System parameters
        user (int): User index for the per-user constants

    Returns:
        tuple: (offloaded bits, local bits)
    """
    if arrival < 0:
        raise ModelDomainError("arrival must be nonnegative")
    if arrival == 0:
        return 0.0, 0.0
    gain = float(np.sum(np.abs(np.asarray(channel)) ** 2))
    if gain <= 0:
        raise ModelDomainError("channel must have nonzero norm")

    if myopic_derivative(0.0, arrival, gain, params, user) >= 0:
        offload = 0.0
    elif myopic_derivative(arrival, arrival, gain, params, user) > 0:
        offload = brentq(myopic_derivative, 0.0, arrival, args=(arrival, gain, params, user),
                         xtol=1e-12 * arrival, rtol=4 * np.finfo(float).eps, maxiter=500)
    else:
        endpoints = (0.0, float(arrival))
        offload = min(endpoints, key=lambda l: myopic_energy(l, arrival, gain, params, user))
    return float(offload), float(arrival - offload)


def solve_myopic(scen, params, wpt_tolerance=WPT_TOLERANCE):
    """
    Myopic design: every slot's arrivals finished within that slot.

    The AP executes in each slot the bits offloaded in the previous one, the
    last slot is computed locally, and each slot gets its own minimum-energy
    covariance for that slot's demand.

    Args:
        scen (Scenario): Ground-truth scenario
        params (SystemParams): System parameters
        wpt_tolerance (float): Relative gap tolerance of the covariance design

    Returns:
        OfflineSolution: Schedule, with the covariance duality gaps summed as its gap
    """
    start = time.perf_counter()
    scen.check_params(params)
    num_users, num_slots = scen.num_users, scen.num_slots
    alloc = Allocation.zeros(num_users, num_slots, scen.num_antennas)
    for i in range(num_slots):
        for k in range(num_users):
            if i == num_slots - 1:
                alloc.local_bits[k, i] = scen.arrivals[k, i]
            else:
                offload, local = myopic_offload_split(scen.arrivals[k, i], scen.offload_channels[k, i], params, k)
                alloc.offload_bits[k, i], alloc.local_bits[k, i] = offload, local
    alloc.mec_bits[1:] = np.sum(alloc.offload_bits[:, :-1], axis=0)

    energies = user_energy(alloc.local_bits, alloc.offload_bits, scen.offload_gains, params)
    gap, converged = 0.0, True
    for i in range(num_slots):
        wpt = min_power_wpt(EnergyDemandProfile(energies[:, i:i + 1]), scen.wpt_channels[:, i:i + 1], params,
                            wpt_tolerance)
        alloc.covariances[i] = wpt.covariances[0]
        gap += wpt.gap
        converged = converged and wpt.converged

    objective = total_objective(alloc, params)
    diagnostics = SolveDiagnostics(
        converged=converged,
        message="per-slot design",
        wpt_gap=gap,
        wpt_converged=converged,
        runtime_s=time.perf_counter() - start,
        feasibility=check_feasibility(alloc, scen, params),
    )
    logger.info("Myopic solve: K=%d N=%d objective=%.6g J", num_users, num_slots, objective)
    return OfflineSolution(alloc, objective, objective - gap, gap, None, diagnostics)


def solve_local_only(scen, params, opts=None, wpt_tolerance=WPT_TOLERANCE):
    """Joint design restricted to local computing (no offloading, no MEC execution)."""
    return solve_offline(scen, params, opts, wpt_tolerance, mode=ExecutionMode.LOCAL_ONLY)


def solve_full_offload(scen, params, opts=None, wpt_tolerance=WPT_TOLERANCE):
    """
    Joint design restricted to offloading.

    Bits arriving in the last slot cannot be offloaded and executed in time, so
    they are the only bits computed locally.
    """
    if params.num_slots < 2:
        raise InfeasibleProblemError("full offloading needs at least two slots")
    return solve_offline(scen, params, opts, wpt_tolerance, mode=ExecutionMode.FULL_OFFLOAD)


def solve_baseline(kind, scen, params, opts=None, wpt_tolerance=WPT_TOLERANCE):
    """Dispatch to one of the benchmark schemes."""
    kind = BaselineKind(kind)
    if kind is BaselineKind.MYOPIC:
        return solve_myopic(scen, params, wpt_tolerance)
    if kind is BaselineKind.LOCAL_ONLY:
        return solve_local_only(scen, params, opts, wpt_tolerance)
    return solve_full_offload(scen, params, opts, wpt_tolerance)
