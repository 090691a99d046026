"""
Joint convex program over bits and covariances of a problem instance.

The closed-form minimizers only reproduce the optimal bits at the exact dual
optimum, and near it they can miss the task constraints by a wide margin.
This module states the primal problem directly and hands it to cvxpy: one
span-restricted PSD block per slot, bits in units of the largest arrival,
energies in units of the instance's energy scale.
"""

import logging
from dataclasses import dataclass

import cvxpy as cp
import numpy as np

from src.components.wpt_beamforming import solve_conic
from src.utils.linalg import span_basis

logger = logging.getLogger(__name__)


@dataclass
class PrimalSchedule:
    """Bits of a primal solution and its objective in joules."""

    local_bits: np.ndarray
    offload_bits: np.ndarray
    mec_bits: np.ndarray
    objective: float
    status: str


def _ordered_pairs(mask):
    """Consecutive enabled positions of a 1-D mask."""
    enabled = np.flatnonzero(mask)
    return list(zip(enabled[:-1], enabled[1:]))


def _harvest_blocks(instance, gain_scale):
    """PSD blocks per slot and the energy each user harvests from them, in energy-scale units."""
    p = instance.params
    tau, eta = p.slot_duration, p.harvest_efficiency
    blocks, rows = [], [[] for _ in range(instance.num_users)]
    for i in range(instance.num_slots):
        basis = span_basis(instance.wpt_channels[:, i, :].T)
        reduced = basis.conj().T @ instance.wpt_channels[:, i, :].T
        block = cp.Variable((basis.shape[1], basis.shape[1]), hermitian=True)
        blocks.append(block)
        for k in range(instance.num_users):
            outer = np.outer(reduced[:, k], reduced[:, k].conj())
            rows[k].append((tau * eta[k] / gain_scale) * cp.real(cp.trace(block @ outer)))
    return blocks, cp.vstack([cp.hstack(row) for row in rows])


def solve_primal_program(instance):
    """
    Minimum AP energy schedule of an instance, solved as one conic program.

    Cumulative harvesting, task causality with the final deadline, and AP
    causality with the final drain are imposed exactly. Optimal local bits of
    each user and optimal AP bits never decrease over the enabled slots, and
    the program states that order as well.

    Args:
        instance (ProblemInstance): Problem instance

    Returns:
        PrimalSchedule | None: Bits and objective, or None when the solver fails
    """
    p = instance.params
    num_users, num_slots = instance.num_users, instance.num_slots
    tau = p.slot_duration
    bit_scale = max(float(np.max(instance.arrivals, initial=0.0)), instance.ap_backlog, 1.0)
    energy_scale = max(instance.energy_scale(), 1e-300)
    gain_scale = float(np.max(tau * p.harvest_efficiency[:, None] * instance.wpt_gains))

    local = cp.multiply(instance.local_mask.astype(float), cp.Variable((num_users, num_slots), nonneg=True))
    offload = cp.multiply(instance.offload_mask.astype(float), cp.Variable((num_users, num_slots), nonneg=True))
    mec = cp.multiply(instance.mec_mask.astype(float), cp.Variable(num_slots, nonneg=True))

    local_coef = p.user_capacitance * p.user_cycles_per_bit ** 3 * bit_scale ** 3 / (tau ** 2 * energy_scale)
    offload_coef = tau * p.snr_penalty * p.noise_power / (instance.offload_gains * energy_scale)
    rate = bit_scale * np.log(2.0) / (tau * p.bandwidth)
    mec_coef = p.ap_capacitance * p.ap_cycles_per_bit ** 3 * bit_scale ** 3 / (tau ** 2 * energy_scale)
    consumed = (cp.multiply(np.repeat(local_coef[:, None], num_slots, axis=1), cp.power(local, 3))
                + cp.multiply(offload_coef, cp.exp(rate * offload) - 1.0))

    blocks, harvested = _harvest_blocks(instance, gain_scale)
    upto = np.tril(np.ones((num_slots, num_slots)))
    before = np.tril(np.ones((num_slots, num_slots)), -1)
    credit = np.repeat((instance.energy_credit / energy_scale)[:, None], num_slots, axis=1)

    executed = (local + offload) @ upto.T
    arrived = (instance.arrivals / bit_scale) @ upto.T
    drained = upto @ mec
    available = instance.ap_backlog / bit_scale + before @ cp.sum(offload, axis=0)

    constraints = [block >> 0 for block in blocks]
    constraints.append(harvested @ upto.T + credit >= consumed @ upto.T)
    constraints += [executed[:, -1] == arrived[:, -1], drained[-1] == available[-1]]
    if num_slots > 1:
        constraints += [executed[:, :-1] <= arrived[:, :-1], drained[:-1] <= available[:-1]]
    for k in range(num_users):
        constraints += [local[k, i] <= local[k, j] for i, j in _ordered_pairs(instance.local_mask[k])]
    constraints += [mec[i] <= mec[j] for i, j in _ordered_pairs(instance.mec_mask)]

    transmit = (tau / gain_scale) * sum(cp.real(cp.trace(block)) for block in blocks)
    problem = cp.Problem(cp.Minimize(transmit + mec_coef * cp.sum(cp.power(mec, 3))), constraints)

    try:
        solve_conic(problem)
    except cp.error.SolverError as e:
        logger.warning("Joint primal program failed: %s", e)
        return None
    if problem.status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
        logger.warning("Joint primal program ended with status %s", problem.status)
        return None

    def bits(expr, mask):
        return np.where(mask, np.clip(np.asarray(expr.value, dtype=float), 0.0, None) * bit_scale, 0.0)

    return PrimalSchedule(
        local_bits=bits(local, instance.local_mask),
        offload_bits=bits(offload, instance.offload_mask),
        mec_bits=bits(mec, instance.mec_mask),
        objective=float(problem.value) * energy_scale,
        status=str(problem.status),
    )
