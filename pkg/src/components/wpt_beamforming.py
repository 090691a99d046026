"""
Energy beamforming design for the wireless powered MEC scheduler.

This module contains the minimum-energy covariance design that meets
cumulative per-user harvesting demands, the rank-one MRC beam, and the
per-slot minimum-energy value function.

Each covariance is restricted to the span of the slot's WPT channels, which
leaves every harvested amount unchanged and cannot increase the trace, so the
semidefinite program works with blocks of size at most min(N_t, K).
"""

import logging
from dataclasses import dataclass

import cvxpy as cp
import numpy as np

from src.components.model import harvested_per_slot, offload_energy_from_gain, local_energy
from src.utils.config import WPT_TOLERANCE
from src.utils.errors import ModelDomainError
from src.utils.linalg import hermitian_eig, project_psd, span_basis

logger = logging.getLogger(__name__)

CLARABEL_SETTINGS = {"tol_gap_abs": 1e-10, "tol_gap_rel": 1e-10, "tol_feas": 1e-10}
SCS_SETTINGS = {"eps": 1e-9, "max_iters": 200000}


@dataclass(frozen=True)
class EnergyDemandProfile:
    """Cumulative energy D[k][i] user k must have harvested by the end of slot i, shape (K, N)."""

    demands: np.ndarray

    def __post_init__(self):
        demands = np.asarray(self.demands, dtype=float)
        if demands.ndim != 2:
            raise ModelDomainError("demands must have shape (K, N)")
        if np.any(demands < 0) or not np.all(np.isfinite(demands)):
            raise ModelDomainError("demands must be finite and nonnegative")
        scale = max(float(np.max(demands, initial=0.0)), 1e-300)
        if np.any(np.diff(demands, axis=1) < -1e-12 * scale):
            raise ModelDomainError("cumulative demands must be nondecreasing")
        object.__setattr__(self, "demands", np.maximum.accumulate(demands, axis=1))

    @classmethod
    def from_slot_energies(cls, energies, credit=None):
        """Cumulative profile from per-slot consumption, less any banked energy."""
        cumulative = np.cumsum(np.asarray(energies, dtype=float), axis=1)
        if credit is not None:
            cumulative = cumulative - np.asarray(credit, dtype=float)[:, None]
        return cls(np.clip(cumulative, 0.0, None))

    @classmethod
    def from_bits(cls, local_bits, offload_bits, offload_gains, params, credit=None):
        tau = params.slot_duration
        energies = local_energy(local_bits, params.user_capacitance[:, None], params.user_cycles_per_bit[:, None],
                                tau) + offload_energy_from_gain(offload_bits, offload_gains, params.noise_power,
                                                                params.bandwidth, tau, params.snr_penalty)
        return cls.from_slot_energies(energies, credit)


@dataclass
class WptSolution:
    """Covariances (N, N_t, N_t), their total energy, the dual certificate y (K, N) and the gap."""

    covariances: np.ndarray
    total_energy: float
    dual_certificate: np.ndarray
    dual_value: float
    gap: float
    converged: bool
    status: str


def mrc_covariance(channel, power):
    """
    Rank-one maximum-ratio beam p h h^H / ||h||^2.

    Args:
        channel (numpy.ndarray): WPT channel vector
        power (float): Transmit power in watts

    Returns:
        numpy.ndarray: Covariance with trace equal to power
    """
    if power < 0:
        raise ModelDomainError("power must be nonnegative")
    channel = np.asarray(channel, dtype=complex)
    gain = float(np.sum(np.abs(channel) ** 2))
    if gain <= 0:
        raise ModelDomainError("channel must have nonzero norm")
    return power * np.outer(channel, channel.conj()) / gain


def _mrc_schedule(demands, channels, params):
    """Sum of per-user MRC beams covering each slot's demand increment."""
    increments = np.diff(demands, axis=1, prepend=0.0)
    num_slots, num_antennas = channels.shape[1], channels.shape[2]
    covariances = np.zeros((num_slots, num_antennas, num_antennas), dtype=complex)
    gains = np.sum(np.abs(channels) ** 2, axis=-1)
    for i in range(num_slots):
        for k in range(channels.shape[0]):
            if increments[k, i] > 0:
                power = increments[k, i] / (params.slot_duration * params.harvest_efficiency[k] * gains[k, i])
                covariances[i] += mrc_covariance(channels[k, i], power)
    return covariances


def solve_conic(problem):
    """Solve with Clarabel at tight tolerances, then Clarabel defaults, then SCS."""
    installed = cp.installed_solvers()
    if "CLARABEL" in installed:
        try:
            return problem.solve(solver=cp.CLARABEL, **CLARABEL_SETTINGS)
        except (cp.error.SolverError, TypeError, ValueError) as e:
            logger.debug("Clarabel with tight settings failed (%s), retrying with defaults", e)
            try:
                return problem.solve(solver=cp.CLARABEL)
            except cp.error.SolverError as e2:
                logger.debug("Clarabel failed: %s", e2)
    return problem.solve(solver=cp.SCS, **SCS_SETTINGS)


def _certificate(y, demands, channels, params):
    """Scale y into the dual-feasible set and return (y, dual value)."""
    eta = params.harvest_efficiency
    tails = np.flip(np.cumsum(np.flip(y, axis=1), axis=1), axis=1)
    outer = np.einsum("kn,kni,knj->nij", tails * eta[:, None], channels, channels.conj())
    values, _ = hermitian_eig(outer, tol=1e-8)
    largest = float(np.max(values[:, -1], initial=0.0))
    if largest > 1.0:
        y = y / largest
    return y, float(np.sum(y * demands))


def min_power_wpt(demands, channels, params, tol=WPT_TOLERANCE):
    """
    Minimum-energy transmit covariances meeting cumulative harvesting demands.

    Solves min sum_i tau tr(S_i) s.t. sum_{j<=i} tau eta_k h_kj^H S_j h_kj >= D[k][i], S_i PSD,
    as a semidefinite program over span-restricted blocks, and returns a
    dual certificate y >= 0 scaled into the dual-feasible set.

    Args:
        demands (EnergyDemandProfile): Cumulative demands, shape (K, N)
        channels (numpy.ndarray): WPT channels, shape (K, N, N_t)
        params (SystemParams): System parameters (tau and eta are used)
        tol (float): Relative duality-gap tolerance for the convergence flag

    Returns:
        WptSolution: Covariances, energy, certificate and gap
    """
    if not isinstance(demands, EnergyDemandProfile):
        demands = EnergyDemandProfile(demands)
    demand = demands.demands
    channels = np.asarray(channels, dtype=complex)
    num_users, num_slots = demand.shape
    if channels.shape[:2] != (num_users, num_slots):
        raise ModelDomainError("channels do not match the demand profile")
    num_antennas = channels.shape[2]
    tau = params.slot_duration
    eta = params.harvest_efficiency

    if not np.any(demand > 0):
        zeros = np.zeros((num_slots, num_antennas, num_antennas), dtype=complex)
        return WptSolution(zeros, 0.0, np.zeros((num_users, num_slots)), 0.0, 0.0, True, "zero demand")

    gains = np.sum(np.abs(channels) ** 2, axis=-1)
    gain_scale = float(np.max(tau * eta[:, None] * gains))
    demand_scale = float(np.max(demand))
    power_scale = demand_scale / gain_scale
    normalized = demand / demand_scale
    last_slot = int(np.max(np.nonzero(np.any(demand > 0, axis=0))[0]))

    bases, blocks, harvest = [], [], []
    for i in range(last_slot + 1):
        basis = span_basis(channels[:, i, :].T)
        reduced = basis.conj().T @ channels[:, i, :].T
        block = cp.Variable((basis.shape[1], basis.shape[1]), hermitian=True)
        bases.append(basis)
        blocks.append(block)
        harvest.append([
            (tau * eta[k] / gain_scale) * cp.real(cp.trace(block @ np.outer(reduced[:, k], reduced[:, k].conj())))
            for k in range(num_users)
        ])

    constraints = [block >> 0 for block in blocks]
    demand_constraints = {}
    for k in range(num_users):
        running = 0
        for i in range(last_slot + 1):
            running = running + harvest[i][k]
            if normalized[k, i] > 0:
                constraint = running >= normalized[k, i]
                demand_constraints[(k, i)] = constraint
                constraints.append(constraint)
    objective = cp.Minimize(sum(cp.real(cp.trace(block)) for block in blocks))
    problem = cp.Problem(objective, constraints)

    status = "solver error"
    try:
        solve_conic(problem)
        status = problem.status
    except cp.error.SolverError as e:
        logger.warning("WPT semidefinite program failed: %s", e)

    if status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
        logger.warning("WPT design fell back to per-user MRC beams (status %s)", status)
        covariances = _mrc_schedule(demand, channels, params)
        total = tau * float(np.sum(np.real(np.trace(covariances, axis1=1, axis2=2))))
        return WptSolution(covariances, total, np.zeros((num_users, num_slots)), 0.0, total, False, str(status))

    covariances = np.zeros((num_slots, num_antennas, num_antennas), dtype=complex)
    for i, (basis, block) in enumerate(zip(bases, blocks)):
        covariances[i] = power_scale * basis @ block.value @ basis.conj().T
    covariances = project_psd(covariances)

    # Rescale uniformly if rounding left any cumulative demand uncovered
    cumulative = np.cumsum(harvested_per_slot(covariances, channels, params), axis=1)
    positive = demand > 0
    shortfall = float(np.max(demand[positive] / np.maximum(cumulative[positive], 1e-300)))
    if shortfall > 1.0:
        covariances = covariances * shortfall

    y = np.zeros((num_users, num_slots))
    for (k, i), constraint in demand_constraints.items():
        value = constraint.dual_value
        y[k, i] = max(0.0, float(np.real(value))) if value is not None else 0.0
    y, dual_value = _certificate(y * tau / gain_scale, demand, channels, params)

    total = tau * float(np.sum(np.real(np.trace(covariances, axis1=1, axis2=2))))
    gap = total - dual_value
    converged = gap <= tol * max(total, 1e-300)
    if not converged:
        logger.debug("WPT duality gap %.3g exceeds tolerance (energy %.6g J)", gap, total)
    return WptSolution(covariances, total, y, dual_value, gap, bool(converged), status)


def slot_energy_value(energies, channels, params):
    """
    Minimum transmit energy delivering `energies` joules to the users within one slot.

    Args:
        energies (numpy.ndarray): Energy per user, shape (K,)
        channels (numpy.ndarray): WPT channels of the slot, shape (K, N_t)
        params (SystemParams): System parameters

    Returns:
        float: Joules
    """
    energies = np.asarray(energies, dtype=float).reshape(-1, 1)
    channels = np.asarray(channels, dtype=complex)[:, None, :]
    return min_power_wpt(EnergyDemandProfile(energies), channels, params).total_energy
