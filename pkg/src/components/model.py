"""
System model for the wireless powered MEC scheduler.

This module contains the domain types (system parameters, scenarios,
allocations), the four energy functions, the total objective and an exact
feasibility checker for the joint WPT / offloading problem.

Slots are indexed from 0 inside the code; slot 0 is the first slot of the horizon.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from src.utils.config import FEASIBILITY_TOLERANCE
from src.utils.errors import ModelDomainError
from src.utils.linalg import hermitian_asymmetry


def _per_user(value, num_users, name):
    array = np.broadcast_to(np.asarray(value, dtype=float), (num_users,)).copy()
    if not np.all(np.isfinite(array)) or np.any(array <= 0):
        raise ModelDomainError(f"{name} must be strictly positive, got {value}")
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class SystemParams:
    """Physical constants of the system; per-user quantities are stored as arrays of length K."""

    num_users: int
    num_slots: int
    num_antennas: int
    slot_duration: float
    bandwidth: float
    noise_power: float
    harvest_efficiency: np.ndarray
    user_capacitance: np.ndarray
    user_cycles_per_bit: np.ndarray
    ap_capacitance: float
    ap_cycles_per_bit: float
    snr_penalty: float = 1.0

    def __post_init__(self):
        for name in ("num_users", "num_slots", "num_antennas"):
            if int(getattr(self, name)) < 1:
                raise ModelDomainError(f"{name} must be a positive integer")
            object.__setattr__(self, name, int(getattr(self, name)))
        for name in ("slot_duration", "bandwidth", "noise_power", "ap_capacitance", "ap_cycles_per_bit"):
            value = float(getattr(self, name))
            if not np.isfinite(value) or value <= 0:
                raise ModelDomainError(f"{name} must be strictly positive, got {value}")
            object.__setattr__(self, name, value)
        if self.snr_penalty != 1.0:
            raise ModelDomainError("snr_penalty is fixed to 1")
        for name in ("harvest_efficiency", "user_capacitance", "user_cycles_per_bit"):
            object.__setattr__(self, name, _per_user(getattr(self, name), self.num_users, name))
        if np.any(self.harvest_efficiency > 1.0):
            raise ModelDomainError("harvest_efficiency must lie in (0, 1]")

    def with_slots(self, num_slots):
        """Copy of the parameters with a different horizon length."""
        return replace(self, num_slots=num_slots)


@dataclass(frozen=True)
class Scenario:
    """Ground-truth task arrivals (K, N) and WPT / offloading channels (K, N, N_t)."""

    arrivals: np.ndarray
    wpt_channels: np.ndarray
    offload_channels: np.ndarray

    def __post_init__(self):
        arrivals = np.asarray(self.arrivals, dtype=float)
        wpt = np.asarray(self.wpt_channels, dtype=complex)
        offload = np.asarray(self.offload_channels, dtype=complex)
        if arrivals.ndim != 2:
            raise ModelDomainError("arrivals must have shape (K, N)")
        if wpt.ndim != 3 or wpt.shape[:2] != arrivals.shape or offload.shape != wpt.shape:
            raise ModelDomainError("channel arrays must have shape (K, N, N_t) matching arrivals")
        if np.any(arrivals < 0) or not np.all(np.isfinite(arrivals)):
            raise ModelDomainError("arrivals must be finite and nonnegative")
        if np.any(np.sum(np.abs(wpt) ** 2, axis=-1) <= 0) or np.any(np.sum(np.abs(offload) ** 2, axis=-1) <= 0):
            raise ModelDomainError("channel vectors must be nonzero")
        object.__setattr__(self, "arrivals", arrivals)
        object.__setattr__(self, "wpt_channels", wpt)
        object.__setattr__(self, "offload_channels", offload)

    @property
    def num_users(self):
        return self.arrivals.shape[0]

    @property
    def num_slots(self):
        return self.arrivals.shape[1]

    @property
    def num_antennas(self):
        return self.wpt_channels.shape[2]

    @property
    def wpt_gains(self):
        """Squared WPT channel norms, shape (K, N)."""
        return np.sum(np.abs(self.wpt_channels) ** 2, axis=-1)

    @property
    def offload_gains(self):
        """Squared offloading channel norms, shape (K, N)."""
        return np.sum(np.abs(self.offload_channels) ** 2, axis=-1)

    def check_params(self, params):
        if (self.num_users, self.num_slots, self.num_antennas) != (
            params.num_users, params.num_slots, params.num_antennas
        ):
            raise ModelDomainError(
                f"scenario dimensions {(self.num_users, self.num_slots, self.num_antennas)} do not match "
                f"params {(params.num_users, params.num_slots, params.num_antennas)}"
            )


@dataclass
class Allocation:
    """Decision variables: covariances (N, N_t, N_t), AP bits (N,), local and offloaded bits (K, N)."""

    covariances: np.ndarray
    mec_bits: np.ndarray
    local_bits: np.ndarray
    offload_bits: np.ndarray

    @classmethod
    def zeros(cls, num_users, num_slots, num_antennas):
        return cls(
            covariances=np.zeros((num_slots, num_antennas, num_antennas), dtype=complex),
            mec_bits=np.zeros(num_slots),
            local_bits=np.zeros((num_users, num_slots)),
            offload_bits=np.zeros((num_users, num_slots)),
        )

    @property
    def num_slots(self):
        return self.mec_bits.shape[0]

    def transmit_powers(self):
        """Per-slot transmit power trace(S_i) in watts."""
        return np.real(np.trace(self.covariances, axis1=1, axis2=2))

    def check_params(self, params):
        expected = {
            "covariances": (params.num_slots, params.num_antennas, params.num_antennas),
            "mec_bits": (params.num_slots,),
            "local_bits": (params.num_users, params.num_slots),
            "offload_bits": (params.num_users, params.num_slots),
        }
        for name, shape in expected.items():
            if np.shape(getattr(self, name)) != shape:
                raise ModelDomainError(f"{name} has shape {np.shape(getattr(self, name))}, expected {shape}")


@dataclass(frozen=True)
class FeasibilityTolerances:
    """Relative tolerances; bit families scale with total arrivals, energy with total demand."""

    relative: float = FEASIBILITY_TOLERANCE
    psd: float = 1e-9


@dataclass
class FeasibilityReport:
    """Worst violation per constraint family of the joint problem."""

    energy_harvesting: float
    user_task_causality: float
    user_deadline: float
    ap_task_causality: float
    ap_deadline: float
    nonnegativity: float
    psd: float
    boundary: float
    bits_tolerance: float
    energy_tolerance: float
    psd_tolerance: float
    feasible: bool = field(init=False)

    def __post_init__(self):
        bit_families = (
            self.user_task_causality, self.user_deadline, self.ap_task_causality,
            self.ap_deadline, self.nonnegativity, self.boundary,
        )
        self.feasible = bool(
            self.energy_harvesting <= self.energy_tolerance
            and all(value <= self.bits_tolerance for value in bit_families)
            and self.psd <= self.psd_tolerance
        )

    def violations(self):
        return {
            "energy_harvesting": self.energy_harvesting,
            "user_task_causality": self.user_task_causality,
            "user_deadline": self.user_deadline,
            "ap_task_causality": self.ap_task_causality,
            "ap_deadline": self.ap_deadline,
            "nonnegativity": self.nonnegativity,
            "psd": self.psd,
            "boundary": self.boundary,
        }


def _nonnegative(bits):
    bits = np.asarray(bits, dtype=float)
    if np.any(bits < 0):
        raise ModelDomainError("bit amounts must be nonnegative")
    return bits


def _channel_gain(channel):
    gain = np.sum(np.abs(np.asarray(channel)) ** 2, axis=-1)
    if np.any(gain <= 0):
        raise ModelDomainError("channel must have nonzero norm")
    return gain


def local_energy(bits, capacitance, cycles_per_bit, slot_duration):
    """
    Energy of executing `bits` locally within one slot at the DVFS-optimal frequency.

    Args:
        bits (float | numpy.ndarray): Bits executed in the slot
        capacitance (float | numpy.ndarray): Effective switched capacitance zeta
        cycles_per_bit (float | numpy.ndarray): CPU cycles per bit C
        slot_duration (float): Slot duration tau

    Returns:
        float | numpy.ndarray: zeta * C^3 * l^3 / tau^2 joules
    """
    bits = _nonnegative(bits)
    return capacitance * cycles_per_bit ** 3 * bits ** 3 / slot_duration ** 2


def offload_energy_from_gain(bits, gain, noise_power, bandwidth, slot_duration, snr_penalty=1.0):
    """Offloading energy given the squared channel norm instead of the channel vector."""
    bits = _nonnegative(bits)
    gain = np.asarray(gain, dtype=float)
    if np.any(gain <= 0):
        raise ModelDomainError("channel must have nonzero norm")
    return slot_duration * snr_penalty * noise_power * np.expm1(np.log(2.0) * bits / (slot_duration * bandwidth)) / gain


def offload_energy(bits, channel, noise_power, bandwidth, slot_duration, snr_penalty=1.0):
    """
    Transmit energy needed to offload `bits` over channel `channel` within one slot.

    Args:
        bits (float | numpy.ndarray): Bits offloaded in the slot
        channel (numpy.ndarray): Offloading channel vector(s), last axis is the antenna axis
        noise_power (float): Receiver noise power sigma^2
        bandwidth (float): Per-user bandwidth B
        slot_duration (float): Slot duration tau

    Returns:
        float | numpy.ndarray: tau * sigma^2 * (2^(l / (tau B)) - 1) / ||g||^2 joules
    """
    return offload_energy_from_gain(bits, _channel_gain(channel), noise_power, bandwidth, slot_duration, snr_penalty)


def harvested_energy(covariance, channel, efficiency, slot_duration):
    """
    Energy harvested by a user under the linear harvesting model.

    Args:
        covariance (numpy.ndarray): Hermitian PSD transmit covariance, shape (..., N_t, N_t)
        channel (numpy.ndarray): WPT channel vector, shape (..., N_t)
        efficiency (float): Harvesting efficiency eta
        slot_duration (float): Slot duration tau

    Returns:
        float | numpy.ndarray: tau * eta * h^H S h joules
    """
    covariance = np.asarray(covariance, dtype=complex)
    if hermitian_asymmetry(covariance) > 1e-10:
        raise ModelDomainError("covariance must be Hermitian")
    channel = np.asarray(channel, dtype=complex)
    quad = np.einsum("...i,...ij,...j->...", channel.conj(), covariance, channel)
    return slot_duration * efficiency * np.real(quad)


def mec_energy(bits, capacitance, cycles_per_bit, slot_duration):
    """Energy of executing `bits` at the AP's MEC server within one slot."""
    return local_energy(bits, capacitance, cycles_per_bit, slot_duration)


def user_energy(local_bits, offload_bits, offload_gains, params):
    """Per-slot energy each user consumes, shape (K, N)."""
    zeta = params.user_capacitance[:, None]
    cycles = params.user_cycles_per_bit[:, None]
    tau = params.slot_duration
    return local_energy(local_bits, zeta, cycles, tau) + offload_energy_from_gain(
        offload_bits, offload_gains, params.noise_power, params.bandwidth, tau, params.snr_penalty
    )


def harvested_per_slot(covariances, wpt_channels, params):
    """Energy harvested by each user in each slot, shape (K, N)."""
    covariances = np.asarray(covariances, dtype=complex)
    quad = np.einsum("kni,nij,knj->kn", wpt_channels.conj(), covariances, wpt_channels)
    return params.slot_duration * params.harvest_efficiency[:, None] * np.real(quad)


def total_objective(alloc, params):
    """
    Total AP energy: WPT energy over all slots plus MEC execution energy from the second slot on.

    Args:
        alloc (Allocation): Allocation to evaluate
        params (SystemParams): System parameters

    Returns:
        float: Joules
    """
    alloc.check_params(params)
    wpt = params.slot_duration * float(np.sum(alloc.transmit_powers()))
    mec = mec_energy(alloc.mec_bits[1:], params.ap_capacitance, params.ap_cycles_per_bit, params.slot_duration)
    return wpt + float(np.sum(mec))


def check_feasibility(alloc, scen, params, tolerances=None):
    """
    Evaluate every constraint of the joint problem at an allocation.

    Never raises for finite inputs of the right shape; violations are reported
    as nonnegative worst-case amounts per family.

    Args:
        alloc (Allocation): Allocation to check
        scen (Scenario): Ground-truth scenario
        params (SystemParams): System parameters
        tolerances (FeasibilityTolerances, optional): Relative tolerances

    Returns:
        FeasibilityReport: Worst violation per family and the feasible flag
    """
    tolerances = tolerances or FeasibilityTolerances()
    alloc.check_params(params)
    scen.check_params(params)

    local = np.asarray(alloc.local_bits, dtype=float)
    offload = np.asarray(alloc.offload_bits, dtype=float)
    mec = np.asarray(alloc.mec_bits, dtype=float)
    covariances = np.asarray(alloc.covariances, dtype=complex)

    nonnegativity = max(
        float(np.max(-local, initial=0.0)),
        float(np.max(-offload, initial=0.0)),
        float(np.max(-mec, initial=0.0)),
    )
    boundary = max(abs(float(mec[0])), float(np.max(np.abs(offload[:, -1]), initial=0.0)))

    # Energy harvesting causality, cumulative per user
    consumed = user_energy(np.clip(local, 0, None), np.clip(offload, 0, None), scen.offload_gains, params)
    hermitian = 0.5 * (covariances + np.swapaxes(covariances.conj(), -1, -2))
    harvested = harvested_per_slot(hermitian, scen.wpt_channels, params)
    energy_gap = np.cumsum(consumed, axis=1) - np.cumsum(harvested, axis=1)
    energy_harvesting = float(np.max(energy_gap, initial=0.0))

    # User task causality and deadline
    executed = np.cumsum(local + offload, axis=1)
    arrived = np.cumsum(scen.arrivals, axis=1)
    task_gap = executed - arrived
    user_task_causality = float(np.max(task_gap[:, :-1], initial=0.0))
    user_deadline = float(np.max(np.abs(task_gap[:, -1]), initial=0.0))

    # AP causality: bits executed by slot i cannot exceed bits offloaded before slot i
    offloaded_before = np.concatenate(([0.0], np.cumsum(np.sum(offload, axis=0))[:-1]))
    ap_gap = np.cumsum(mec) - offloaded_before
    ap_task_causality = float(np.max(ap_gap[:-1], initial=0.0))
    ap_deadline = abs(float(ap_gap[-1]))

    eigenvalues = np.linalg.eigvalsh(hermitian)
    traces = np.real(np.trace(hermitian, axis1=1, axis2=2))
    psd = max(float(np.max(-eigenvalues[:, 0], initial=0.0)), hermitian_asymmetry(covariances))

    bits_scale = max(1.0, float(np.sum(scen.arrivals)))
    energy_scale = max(float(np.sum(consumed)), float(np.sum(harvested)), 1e-30)
    psd_scale = max(1e-30, float(np.max(traces, initial=0.0)))
    return FeasibilityReport(
        energy_harvesting=energy_harvesting,
        user_task_causality=user_task_causality,
        user_deadline=user_deadline,
        ap_task_causality=ap_task_causality,
        ap_deadline=ap_deadline,
        nonnegativity=nonnegativity,
        psd=psd,
        boundary=boundary,
        bits_tolerance=tolerances.relative * bits_scale,
        energy_tolerance=tolerances.relative * energy_scale,
        psd_tolerance=tolerances.psd * psd_scale,
    )
