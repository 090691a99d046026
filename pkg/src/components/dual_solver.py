"""
Lagrange dual solver for the joint WPT and computation offloading problem.

This module contains the closed-form minimizers of the Lagrangian
subproblems, the dual function and its subgradient, the cuts that keep the
multipliers inside the dual-feasible set, and the ellipsoid method that
maximizes the dual function.

Multiplier vectors are laid out as [lambda (K*M), mu (K*M), nu (M)], each
user block ordered by slot (index k*M + i).
"""

import logging
import time
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import pandas as pd

from src.utils.config import (
    ITERATIONS_PER_DIMENSION_SQ,
    LAMBDA_FLOOR_SCALE,
    MIN_ITERATIONS,
    PRIMAL_RESIDUAL_TOLERANCE,
    RELATIVE_ACCURACY,
    STAGNATION_WINDOW,
)
from src.utils.errors import ModelDomainError, TrialTimeoutError
from src.utils.linalg import hermitian_eig

logger = logging.getLogger(__name__)

PSD_SLACK = 1e-12
MAX_EXPONENT = 200.0
ACCURACY_FLOOR = 1e-3


def _tail_sum(values):
    return np.flip(np.cumsum(np.flip(values, axis=-1), axis=-1), axis=-1)


@dataclass
class DualVariables:
    """Multipliers of the harvesting (lam), user task (mu) and AP task (nu) constraints."""

    lam: np.ndarray
    mu: np.ndarray
    nu: np.ndarray

    @classmethod
    def zeros(cls, num_users, num_slots):
        return cls(np.zeros((num_users, num_slots)), np.zeros((num_users, num_slots)), np.zeros(num_slots))

    @classmethod
    def from_vector(cls, vector, num_users, num_slots):
        vector = np.asarray(vector, dtype=float)
        block = num_users * num_slots
        if vector.shape != (2 * block + num_slots,):
            raise ModelDomainError(f"dual vector has shape {vector.shape}, expected ({2 * block + num_slots},)")
        return cls(
            vector[:block].reshape(num_users, num_slots).copy(),
            vector[block:2 * block].reshape(num_users, num_slots).copy(),
            vector[2 * block:].copy(),
        )

    def to_vector(self):
        return np.concatenate((self.lam.ravel(), self.mu.ravel(), self.nu.ravel()))

    @property
    def dimension(self):
        return 2 * self.lam.size + self.nu.size

    def tail_sums(self):
        return DualTailSums.from_dual(self)


@dataclass
class DualTailSums:
    """Suffix sums of the multipliers over slots i..M."""

    lam: np.ndarray
    mu: np.ndarray
    nu: np.ndarray

    @classmethod
    def from_dual(cls, dv):
        return cls(_tail_sum(dv.lam), _tail_sum(dv.mu), _tail_sum(dv.nu))

    def nu_next(self):
        """Suffix sums shifted by one slot (sum over i+1..M), zero past the end."""
        return np.append(self.nu[1:], 0.0)


@dataclass
class BitCandidates:
    """Minimizers of the Lagrangian in the bit variables."""

    local_bits: np.ndarray
    offload_bits: np.ndarray
    mec_bits: np.ndarray


@dataclass
class EllipsoidOptions:
    """
    Settings of the ellipsoid method.

    initial_radius multiplies the per-coordinate radii derived from the problem
    scale; target_accuracy defaults to relative_accuracy times the best dual
    value found so far, floored at a small fraction of the energy of a simple
    feasible schedule. residual_tolerance is the relative task residual of the
    candidates below which a small gap bound ends the run without waiting for
    stagnation; deadline is a time.monotonic() instant past which the run aborts.
    """

    initial_center: Optional[np.ndarray] = None
    initial_radius: float = 1.0
    lipschitz_bound: Optional[float] = None
    target_accuracy: Optional[float] = None
    relative_accuracy: float = RELATIVE_ACCURACY
    max_iterations: Optional[int] = None
    lambda_floor: Optional[float] = None
    stagnation_window: int = STAGNATION_WINDOW
    residual_tolerance: float = PRIMAL_RESIDUAL_TOLERANCE
    deadline: Optional[float] = None

    def __post_init__(self):
        if self.initial_radius <= 0:
            raise ModelDomainError("initial_radius must be positive")
        if self.target_accuracy is not None and self.target_accuracy <= 0:
            raise ModelDomainError("target_accuracy must be positive")
        if self.lambda_floor is not None and self.lambda_floor <= 0:
            raise ModelDomainError("lambda_floor must be positive")
        if self.relative_accuracy <= 0:
            raise ModelDomainError("relative_accuracy must be positive")
        if self.residual_tolerance <= 0:
            raise ModelDomainError("residual_tolerance must be positive")


@dataclass
class DualCut:
    """Half-space {z : normal^T (z - x) <= 0} to keep."""

    kind: str
    normal: np.ndarray
    index: int = -1


@dataclass
class IterationRecord:
    iteration: int
    dual_value: float
    gap_bound: float
    cut_type: str


@dataclass
class EllipsoidResult:
    dual: DualVariables
    dual_value: float
    candidates: BitCandidates
    iterations: int
    converged: bool
    gap_bound: float
    target_accuracy: float
    lipschitz_estimate: float
    message: str
    log: List[IterationRecord] = field(default_factory=list)
    primal_residual: float = 0.0


# Closed-form subproblem solutions

def solve_mec_subproblem(nu_tail, capacitance, cycles_per_bit, slot_duration, pin_first=True):
    """
    AP execution bits minimizing zeta0 C0^3 l^3 / tau^2 + V l per slot.

    Args:
        nu_tail (numpy.ndarray): Suffix sums V of the AP multipliers
        capacitance (float): AP switched capacitance zeta0
        cycles_per_bit (float): AP cycles per bit C0
        slot_duration (float): Slot duration tau
        pin_first (bool): Keep the first slot at zero

    Returns:
        numpy.ndarray: Bits per slot
    """
    nu_tail = np.asarray(nu_tail, dtype=float)
    scale = slot_duration / (np.sqrt(3.0 * capacitance) * cycles_per_bit ** 1.5)
    bits = scale * np.sqrt(np.clip(-nu_tail, 0.0, None))
    if pin_first and bits.size:
        bits = bits.copy()
        bits.flat[0] = 0.0
    return bits


def solve_loc_subproblem(lam_tail, mu_tail, capacitance, cycles_per_bit, slot_duration):
    """
    Local bits minimizing Lambda zeta C^3 l^3 / tau^2 + M l.

    Requires Lambda > 0; the feasibility cuts keep every suffix sum above the floor.
    """
    lam_tail = np.asarray(lam_tail, dtype=float)
    mu_tail = np.asarray(mu_tail, dtype=float)
    if np.any(lam_tail <= 0):
        raise ModelDomainError("harvesting multiplier suffix sums must be strictly positive")
    scale = slot_duration / (np.sqrt(3.0 * capacitance) * cycles_per_bit ** 1.5)
    return scale * np.sqrt(np.clip(-mu_tail, 0.0, None) / lam_tail)


def offload_threshold(gain, noise_power, bandwidth, snr_penalty=1.0):
    """Marginal offloading energy per bit at zero rate, divided by the harvesting multiplier."""
    return snr_penalty * noise_power * np.log(2.0) / (bandwidth * np.asarray(gain, dtype=float))


def solve_off_subproblem_from_gain(lam_tail, mu_tail, nu_tail, gain, noise_power, bandwidth, slot_duration,
                                   snr_penalty=1.0):
    """Offloading bits given the squared channel norm; see solve_off_subproblem."""
    lam_tail = np.asarray(lam_tail, dtype=float)
    if np.any(lam_tail <= 0):
        raise ModelDomainError("harvesting multiplier suffix sums must be strictly positive")
    gain = np.asarray(gain, dtype=float)
    if np.any(gain <= 0):
        raise ModelDomainError("offloading channel must have nonzero norm")
    ratio = (np.asarray(nu_tail, dtype=float) - np.asarray(mu_tail, dtype=float)) / lam_tail
    ratio = ratio / offload_threshold(gain, noise_power, bandwidth, snr_penalty)
    return slot_duration * bandwidth * np.log2(np.maximum(1.0, ratio))


def solve_off_subproblem(lam_tail, mu_tail, nu_tail, channel, noise_power, bandwidth, slot_duration,
                         snr_penalty=1.0):
    """
    Offloaded bits minimizing Lambda tau sigma^2 (2^(l/(tau B)) - 1)/||g||^2 + (M - V) l.

    The AP multiplier argument is the suffix sum that prices the offloaded bits,
    i.e. the one starting at the slot after the offload.

    Args:
        lam_tail (float | numpy.ndarray): Harvesting multiplier suffix sum Lambda
        mu_tail (float | numpy.ndarray): User task multiplier suffix sum M
        nu_tail (float | numpy.ndarray): AP multiplier suffix sum V
        channel (numpy.ndarray): Offloading channel vector(s)
        noise_power (float): Noise power sigma^2
        bandwidth (float): Bandwidth B
        slot_duration (float): Slot duration tau

    Returns:
        float | numpy.ndarray: tau B log2(max(1, ((V - M) / Lambda) / (sigma^2 ln 2 / (B ||g||^2))))
    """
    gain = np.sum(np.abs(np.asarray(channel)) ** 2, axis=-1)
    return solve_off_subproblem_from_gain(lam_tail, mu_tail, nu_tail, gain, noise_power, bandwidth,
                                          slot_duration, snr_penalty)


def _candidate_bits(tails, instance):
    p = instance.params
    lam = tails.lam
    local = np.where(
        instance.local_mask,
        solve_loc_subproblem(lam, tails.mu, p.user_capacitance[:, None], p.user_cycles_per_bit[:, None],
                             p.slot_duration),
        0.0,
    )
    offload = np.where(
        instance.offload_mask,
        solve_off_subproblem_from_gain(lam, tails.mu, tails.nu_next()[None, :], instance.offload_gains,
                                       p.noise_power, p.bandwidth, p.slot_duration, p.snr_penalty),
        0.0,
    )
    mec = np.where(
        instance.mec_mask,
        solve_mec_subproblem(tails.nu, p.ap_capacitance, p.ap_cycles_per_bit, p.slot_duration, pin_first=False),
        0.0,
    )
    return BitCandidates(local, offload, mec)


def dual_function(dv, instance):
    """
    Dual function value and the Lagrangian minimizers at a dual-feasible point.

    The covariance part of the Lagrangian vanishes on the dual-feasible set,
    so only the bit subproblems contribute.

    Args:
        dv (DualVariables): Multipliers inside the dual-feasible set
        instance (ProblemInstance): Problem instance

    Returns:
        tuple: (dual value in joules, BitCandidates)
    """
    tails = dv.tail_sums()
    cand = _candidate_bits(tails, instance)
    energy = instance.user_energy(cand.local_bits, cand.offload_bits)
    value = np.sum(tails.lam * energy)
    value += np.sum(tails.mu * (cand.local_bits + cand.offload_bits))
    value -= np.sum(tails.nu_next()[None, :] * cand.offload_bits)
    value += np.sum(instance.mec_energy(cand.mec_bits) + tails.nu * cand.mec_bits)
    value -= np.sum(tails.mu * instance.arrivals)
    value -= tails.nu[0] * instance.ap_backlog
    value -= np.sum(tails.lam[:, 0] * instance.energy_credit)
    return float(value), cand


def dual_subgradient(dv, candidates, instance):
    """
    Constraint residuals at the Lagrangian minimizers (a supergradient of the dual function).

    Args:
        dv (DualVariables): Multipliers the candidates were computed at
        candidates (BitCandidates): Output of dual_function at dv
        instance (ProblemInstance): Problem instance

    Returns:
        numpy.ndarray: Vector of length 2KM + M
    """
    if candidates.local_bits.shape != dv.lam.shape:
        raise ModelDomainError("candidates do not match the multipliers")
    energy = instance.user_energy(candidates.local_bits, candidates.offload_bits)
    harvest_block = np.cumsum(energy, axis=1) - instance.energy_credit[:, None]
    task_block = np.cumsum(candidates.local_bits + candidates.offload_bits - instance.arrivals, axis=1)
    offloaded_before = np.concatenate(([0.0], np.cumsum(np.sum(candidates.offload_bits, axis=0))[:-1]))
    ap_block = np.cumsum(candidates.mec_bits) - instance.ap_backlog - offloaded_before
    return np.concatenate((harvest_block.ravel(), task_block.ravel(), ap_block))


def candidate_residual(candidates, instance):
    """
    Largest task or AP constraint violation of the candidates, relative to the total bits.

    Causality rows count only their excess; the deadline rows count in both directions.
    """
    task = np.cumsum(candidates.local_bits + candidates.offload_bits - instance.arrivals, axis=1)
    offloaded_before = np.concatenate(([0.0], np.cumsum(np.sum(candidates.offload_bits, axis=0))[:-1]))
    ap = np.cumsum(candidates.mec_bits) - instance.ap_backlog - offloaded_before
    worst = max(
        float(np.max(task[:, :-1], initial=0.0)),
        float(np.max(np.abs(task[:, -1]), initial=0.0)),
        float(np.max(ap[:-1], initial=0.0)),
        abs(float(ap[-1])),
    )
    return worst / max(1.0, float(np.sum(instance.arrivals)) + instance.ap_backlog)


def _unit(size, index):
    vector = np.zeros(size)
    vector[index] = 1.0
    return vector


def feasibility_cut(dv, instance, lambda_floor):
    """
    Separating hyperplane for the first violated dual-feasibility condition.

    Checks in order: nonnegativity of lam and of the inequality multipliers of
    mu and nu, the floor on every harvesting suffix sum, and positive
    semidefiniteness of I - sum_k Lambda_k eta_k h_k h_k^H in every slot.

    Args:
        dv (DualVariables): Point to test
        instance (ProblemInstance): Problem instance
        lambda_floor (float): Lower bound on every harvesting suffix sum

    Returns:
        DualCut | None: Cut to apply, or None when dv is dual-feasible
    """
    num_users, num_slots = dv.lam.shape
    block = num_users * num_slots
    size = dv.dimension

    sign_vector = np.concatenate((dv.lam.ravel(), dv.mu[:, :-1].ravel(), dv.nu[:-1]))
    if np.any(sign_vector < 0):
        position = int(np.argmin(sign_vector))
        if position < block:
            index = position
        elif position < block + num_users * (num_slots - 1):
            offset = position - block
            k, i = divmod(offset, num_slots - 1)
            index = block + k * num_slots + i
        else:
            index = 2 * block + (position - block - num_users * (num_slots - 1))
        return DualCut("sign", -_unit(size, index), index)

    tails = _tail_sum(dv.lam)
    if np.any(tails < lambda_floor):
        k, i = np.unravel_index(int(np.argmin(tails - lambda_floor)), tails.shape)
        normal = np.zeros(size)
        normal[k * num_slots + i:(k + 1) * num_slots] = -1.0
        return DualCut("floor", normal, int(k * num_slots + i))

    eta = instance.params.harvest_efficiency
    channels = instance.wpt_channels
    weighted = tails * eta[:, None]
    outer = np.einsum("kn,kni,knj->nij", weighted, channels, channels.conj())
    identity = np.eye(channels.shape[2])
    values, vectors = hermitian_eig(identity[None, :, :] - outer)
    worst = values[:, 0]
    if np.any(worst < -PSD_SLACK):
        i = int(np.argmin(worst))
        x = vectors[i, :, 0]
        coeff = eta * np.abs(channels[:, i, :] @ x.conj()) ** 2
        normal = np.zeros(size)
        for k in range(num_users):
            normal[k * num_slots + i:(k + 1) * num_slots] = coeff[k]
        return DualCut("psd", normal, i)
    return None


def ellipsoid_step(center, shape, normal):
    """
    Central-cut ellipsoid update keeping {z : normal^T (z - center) <= 0}.

    Args:
        center (numpy.ndarray): Current center x
        shape (numpy.ndarray): Current shape matrix P, ellipsoid {z : (z-x)^T P^-1 (z-x) <= 1}
        normal (numpy.ndarray): Cut normal a

    Returns:
        tuple | None: (new center, new shape), or None when the cut is degenerate
    """
    n = center.size
    direction = shape @ normal
    curvature = float(normal @ direction)
    if not np.isfinite(curvature) or curvature <= 0.0:
        return None
    step = direction / np.sqrt(curvature)
    new_center = center - step / (n + 1)
    new_shape = (n * n / (n * n - 1.0)) * (shape - (2.0 / (n + 1)) * np.outer(step, step))
    return new_center, 0.5 * (new_shape + new_shape.T)


def log_volume_decrement(n):
    """Change in log-volume of the ellipsoid per central cut in dimension n."""
    return 0.5 * (n * np.log(n * n / (n * n - 1.0)) + np.log(1.0 - 2.0 / (n + 1)))


def initial_center(instance):
    """Strictly feasible start: small equal harvesting multipliers, zero task multipliers."""
    p = instance.params
    num_users, num_slots = instance.num_users, instance.num_slots
    lam0 = 0.5 / (num_slots * num_users * float(np.max(p.harvest_efficiency)) * float(np.max(instance.wpt_gains)))
    dv = DualVariables.zeros(num_users, num_slots)
    dv.lam[:] = lam0
    return dv


def coordinate_radii(instance):
    """
    Per-coordinate half-widths of the box the initial ellipsoid must cover.

    Harvesting multipliers are bounded by the PSD condition; task multipliers by
    the largest marginal energy any feasible schedule can face.
    """
    p = instance.params
    tau = p.slot_duration
    eta = p.harvest_efficiency
    lam_radii = 1.0 / (eta[:, None] * instance.wpt_gains)
    lam_max = np.max(lam_radii, axis=1)

    user_totals = np.sum(instance.arrivals, axis=1)
    local_marginal = 3.0 * p.user_capacitance * p.user_cycles_per_bit ** 3 * user_totals ** 2 / tau ** 2
    offload_slots = np.maximum(1, np.sum(instance.offload_mask, axis=1))
    exponent = np.minimum(user_totals / (offload_slots * tau * p.bandwidth), MAX_EXPONENT)
    min_offload_gain = np.min(instance.offload_gains, axis=1)
    offload_marginal = p.noise_power * np.log(2.0) * np.exp2(exponent) / (p.bandwidth * min_offload_gain)
    marginal = np.where(np.any(instance.local_mask, axis=1), local_marginal, offload_marginal)

    total = float(np.sum(instance.arrivals)) + instance.ap_backlog
    mec_marginal = 3.0 * p.ap_capacitance * p.ap_cycles_per_bit ** 3 * total ** 2 / tau ** 2
    task_radius = 4.0 * (float(np.max(lam_max * marginal)) + mec_marginal)
    task_radius = max(task_radius, 1e-12 * float(np.max(lam_max)), 1e-300)

    num_users, num_slots = instance.num_users, instance.num_slots
    return np.concatenate((
        lam_radii.ravel(),
        np.full(num_users * num_slots, task_radius),
        np.full(num_slots, task_radius),
    ))


def ellipsoid_maximize(instance, opts=None):
    """
    Maximize the dual function with the central-cut ellipsoid method.

    The search runs in coordinates scaled by coordinate_radii so the initial
    ellipsoid is a ball. Infeasible centers receive feasibility cuts; feasible
    ones an objective cut along the negated subgradient. The run stops once the
    objective-gap bound sqrt(s^T P s) is within the target accuracy and either
    the best candidates meet the task constraints to residual_tolerance or the
    best value has not improved by more than the accuracy over the stagnation
    window. A certificate on the dual value says nothing about the candidates;
    callers compare a recovered schedule against dual_value.

    Args:
        instance (ProblemInstance): Problem instance
        opts (EllipsoidOptions, optional): Solver settings

    Returns:
        EllipsoidResult: Best feasible iterate, its dual value and the iteration log
    """
    opts = opts or EllipsoidOptions()
    num_users, num_slots = instance.num_users, instance.num_slots
    n = instance.dimension

    if instance.is_empty():
        zeros = DualVariables.zeros(num_users, num_slots)
        empty = BitCandidates(np.zeros((num_users, num_slots)), np.zeros((num_users, num_slots)),
                              np.zeros(num_slots))
        return EllipsoidResult(zeros, 0.0, empty, 0, True, 0.0, 0.0, 0.0, "empty instance")

    radii = coordinate_radii(instance)
    center_dv = initial_center(instance)
    origin = center_dv.to_vector() if opts.initial_center is None else np.asarray(opts.initial_center, dtype=float)
    lambda_floor = opts.lambda_floor or LAMBDA_FLOOR_SCALE * float(np.mean(radii[:num_users * num_slots]))
    scale = opts.relative_accuracy * instance.energy_scale()
    floor = ACCURACY_FLOOR * scale
    accuracy = opts.target_accuracy or scale
    max_iterations = opts.max_iterations or max(MIN_ITERATIONS, ITERATIONS_PER_DIMENSION_SQ * n * n)

    u = np.zeros(n)
    shape = n * opts.initial_radius ** 2 * np.eye(n)

    best_value = -np.inf
    best_point = None
    best_candidates = None
    best_residual = np.inf
    best_history = []
    upper_bound = np.inf
    lipschitz = 0.0
    log = []
    converged = False
    message = "iteration limit reached"
    iteration = 0

    for iteration in range(1, max_iterations + 1):
        if opts.deadline is not None and time.monotonic() > opts.deadline:
            raise TrialTimeoutError(f"ellipsoid passed its deadline after {iteration - 1} iterations (n={n})")
        point = origin + radii * u
        dv = DualVariables.from_vector(point, num_users, num_slots)
        cut = feasibility_cut(dv, instance, lambda_floor)
        if cut is not None:
            normal = cut.normal
            log.append(IterationRecord(iteration, np.nan, np.nan, cut.kind))
        else:
            value, cand = dual_function(dv, instance)
            subgradient = dual_subgradient(dv, cand, instance)
            lipschitz = max(lipschitz, float(np.linalg.norm(subgradient)))
            if value > best_value:
                best_value, best_point, best_candidates = value, point, cand
                best_residual = candidate_residual(cand, instance)
            normal = -subgradient
            scaled = radii * subgradient
            gap = float(np.sqrt(max(scaled @ shape @ scaled, 0.0)))
            upper_bound = min(upper_bound, value + gap)
            best_history.append(best_value)
            if opts.target_accuracy is None:
                accuracy = max(opts.relative_accuracy * best_value, floor)
            log.append(IterationRecord(iteration, value, gap, "objective"))
            window = opts.stagnation_window
            stagnant = len(best_history) > window and best_history[-1] - best_history[-1 - window] <= accuracy
            if gap <= accuracy and best_residual <= opts.residual_tolerance:
                converged = True
                message = "gap bound and task residuals within tolerance"
                break
            if gap <= accuracy and stagnant:
                converged = True
                message = f"gap bound within target accuracy, residual {best_residual:.3g}"
                break
            if not np.any(subgradient):
                converged = True
                message = "zero subgradient"
                break
        step = ellipsoid_step(u, shape, radii * normal)
        if step is None:
            message = "degenerate ellipsoid"
            converged = cut is None and upper_bound - best_value <= accuracy
            break
        u, shape = step

    if best_point is None:
        logger.warning("Ellipsoid found no dual-feasible point in %d iterations", iteration)
        best_dv = center_dv
        best_value, best_candidates = dual_function(best_dv, instance)
        best_residual = candidate_residual(best_candidates, instance)
    else:
        best_dv = DualVariables.from_vector(best_point, num_users, num_slots)

    if not converged:
        logger.warning("Ellipsoid stopped without certificate after %d iterations (n=%d): %s", iteration, n, message)
    logger.debug("Ellipsoid n=%d iterations=%d dual=%.6g gap=%.3g", n, iteration, best_value,
                 upper_bound - best_value)
    return EllipsoidResult(
        dual=best_dv,
        dual_value=float(best_value),
        candidates=best_candidates,
        iterations=iteration,
        converged=converged,
        gap_bound=float(upper_bound - best_value),
        target_accuracy=float(accuracy),
        lipschitz_estimate=lipschitz if opts.lipschitz_bound is None else float(opts.lipschitz_bound),
        message=message,
        log=log,
        primal_residual=float(best_residual),
    )


def iteration_log_frame(log):
    """Iteration log as a DataFrame with columns iter, dual_value, gap_bound, cut_type."""
    return pd.DataFrame(
        [(r.iteration, r.dual_value, r.gap_bound, r.cut_type) for r in log],
        columns=["iter", "dual_value", "gap_bound", "cut_type"],
    )
