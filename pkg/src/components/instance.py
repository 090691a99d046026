"""
Problem instances solved by the dual machinery.

A ProblemInstance covers the full-horizon problem as well as every
sliding-window problem: the first column of the arrivals carries any residual
user backlog, the AP may start with a backlog of offloaded bits, users may
start with an energy credit, and per-variable masks express boundary pins
and the restricted (local-only / full-offload) schemes.
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np

from src.components.model import local_energy, mec_energy, offload_energy_from_gain
from src.utils.errors import InfeasibleProblemError, ModelDomainError


class ExecutionMode(Enum):
    JOINT = "joint"
    LOCAL_ONLY = "local-only"
    FULL_OFFLOAD = "full-offload"


@dataclass(frozen=True)
class ProblemInstance:
    params: object
    arrivals: np.ndarray
    wpt_channels: np.ndarray
    offload_channels: np.ndarray
    ap_backlog: float
    energy_credit: np.ndarray
    local_mask: np.ndarray
    offload_mask: np.ndarray
    mec_mask: np.ndarray
    mode: ExecutionMode = ExecutionMode.JOINT

    @classmethod
    def build(cls, params, arrivals, wpt_channels, offload_channels, ap_backlog=0.0, energy_credit=None,
              pin_first_mec=True, pin_last_offload=True, mode=ExecutionMode.JOINT):
        """
        Assemble an instance and its variable masks.

        Args:
            params (SystemParams): Parameters whose num_slots equals the instance length
            arrivals (numpy.ndarray): Bits to execute per slot, shape (K, M); slot 0 includes residuals
            wpt_channels (numpy.ndarray): WPT channels, shape (K, M, N_t)
            offload_channels (numpy.ndarray): Offloading channels, shape (K, M, N_t)
            ap_backlog (float): Offloaded bits waiting at the AP at the start of slot 0
            energy_credit (numpy.ndarray, optional): Harvested energy already banked per user
            pin_first_mec (bool): Force zero AP execution in slot 0
            pin_last_offload (bool): Force zero offloading in the last slot
            mode (ExecutionMode): Joint design or one of the restricted schemes

        Returns:
            ProblemInstance: Validated instance
        """
        arrivals = np.asarray(arrivals, dtype=float)
        num_users, num_slots = arrivals.shape
        if (num_users, num_slots) != (params.num_users, params.num_slots):
            raise ModelDomainError("arrivals do not match the instance parameters")
        if np.any(arrivals < 0) or ap_backlog < 0:
            raise ModelDomainError("arrivals and backlog must be nonnegative")
        credit = np.zeros(num_users) if energy_credit is None else np.asarray(energy_credit, dtype=float)
        if credit.shape != (num_users,) or np.any(credit < 0):
            raise ModelDomainError("energy credit must be a nonnegative vector of length K")

        local_mask = np.ones((num_users, num_slots), dtype=bool)
        offload_mask = np.ones((num_users, num_slots), dtype=bool)
        mec_mask = np.ones(num_slots, dtype=bool)
        if pin_last_offload:
            offload_mask[:, -1] = False
        if pin_first_mec:
            mec_mask[0] = False
        if mode is ExecutionMode.LOCAL_ONLY:
            offload_mask[:] = False
            mec_mask[:] = False
            if ap_backlog > 0:
                raise InfeasibleProblemError("local-only scheme cannot drain an AP backlog")
        elif mode is ExecutionMode.FULL_OFFLOAD:
            # Local execution survives only where offloading is pinned to zero
            local_mask = ~offload_mask
        if ap_backlog > 0 and not mec_mask.any():
            raise InfeasibleProblemError("AP backlog but no slot allows MEC execution")

        return cls(
            params=params,
            arrivals=arrivals,
            wpt_channels=np.asarray(wpt_channels, dtype=complex),
            offload_channels=np.asarray(offload_channels, dtype=complex),
            ap_backlog=float(ap_backlog),
            energy_credit=credit,
            local_mask=local_mask,
            offload_mask=offload_mask,
            mec_mask=mec_mask,
            mode=mode,
        )

    @classmethod
    def offline(cls, scen, params, mode=ExecutionMode.JOINT):
        """Full-horizon instance of a scenario."""
        scen.check_params(params)
        return cls.build(params, scen.arrivals, scen.wpt_channels, scen.offload_channels, mode=mode)

    @property
    def num_users(self):
        return self.arrivals.shape[0]

    @property
    def num_slots(self):
        return self.arrivals.shape[1]

    @property
    def dimension(self):
        return 2 * self.num_users * self.num_slots + self.num_slots

    @property
    def wpt_gains(self):
        return np.sum(np.abs(self.wpt_channels) ** 2, axis=-1)

    @property
    def offload_gains(self):
        return np.sum(np.abs(self.offload_channels) ** 2, axis=-1)

    def is_empty(self):
        return not np.any(self.arrivals > 0) and self.ap_backlog <= 0

    def user_energy(self, local_bits, offload_bits):
        """Per-slot user energy (K, M) at a bit allocation."""
        p = self.params
        return local_energy(local_bits, p.user_capacitance[:, None], p.user_cycles_per_bit[:, None],
                            p.slot_duration) + offload_energy_from_gain(
            offload_bits, self.offload_gains, p.noise_power, p.bandwidth, p.slot_duration, p.snr_penalty
        )

    def mec_energy(self, mec_bits):
        p = self.params
        return mec_energy(mec_bits, p.ap_capacitance, p.ap_cycles_per_bit, p.slot_duration)

    def energy_scale(self):
        """
        Energy of a simple feasible schedule, used to scale solver tolerances.

        Each slot's arrivals are executed in that slot (locally, or offloaded when local
        execution is disabled and run at the AP one slot later) and every user is
        charged with its own MRC beam.

        Returns:
            float: Joules
        """
        p = self.params
        local = np.where(self.local_mask, self.arrivals, 0.0)
        offload = np.where(self.local_mask, 0.0, self.arrivals)
        offload = np.where(self.offload_mask, offload, 0.0)
        demand = self.user_energy(local, offload)
        wpt = float(np.sum(demand / (p.harvest_efficiency[:, None] * self.wpt_gains)))
        ap_bits = np.zeros(self.num_slots)
        ap_bits[1:] = np.sum(offload, axis=0)[:-1]
        first_mec = int(np.argmax(self.mec_mask)) if self.mec_mask.any() else 0
        ap_bits[first_mec] += self.ap_backlog
        return wpt + float(np.sum(self.mec_energy(ap_bits)))
