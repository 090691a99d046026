"""
Scenario generation for the wireless powered MEC scheduler.

This module draws ground-truth Rician channels and uniform task arrivals, and
derives predicted (noisy) task and channel information with relative
Gaussian errors. Every random quantity comes from its own substream, derived
from the master seed by (user, slot, quantity), so results do not depend on
the order in which cells are generated.
"""

from dataclasses import dataclass

import numpy as np

from src.components.model import Scenario
from src.utils.errors import ModelDomainError

# Substream tags per random quantity
WPT_SCATTER = 0
OFFLOAD_SCATTER = 1
ARRIVALS = 2
ARRIVAL_ERROR = 3
WPT_ERROR = 4
OFFLOAD_ERROR = 5


@dataclass(frozen=True)
class ChannelGeometry:
    """Large-scale propagation: per-user distances, path loss, Rician factor (linear reference path loss)."""

    distances: tuple
    pathloss_exponent: float
    reference_pathloss: float
    rician_factor: float
    num_antennas: int

    def __post_init__(self):
        distances = tuple(float(d) for d in np.atleast_1d(self.distances))
        if not distances or any(d <= 0 for d in distances):
            raise ModelDomainError("distances must be strictly positive")
        if self.pathloss_exponent <= 0:
            raise ModelDomainError("pathloss_exponent must be positive")
        if not 0 < self.reference_pathloss <= 1:
            raise ModelDomainError("reference_pathloss must be linear and lie in (0, 1]")
        if self.rician_factor < 0:
            raise ModelDomainError("rician_factor must be nonnegative")
        if int(self.num_antennas) < 1:
            raise ModelDomainError("num_antennas must be positive")
        object.__setattr__(self, "distances", distances)
        object.__setattr__(self, "num_antennas", int(self.num_antennas))

    @property
    def num_users(self):
        return len(self.distances)

    def average_gain(self):
        """Reference path loss times distance^-exponent per user."""
        return self.reference_pathloss * np.asarray(self.distances) ** (-self.pathloss_exponent)

    def weights(self):
        """(LoS weight, scatter weight) per user."""
        gain = self.average_gain()
        if np.isinf(self.rician_factor):
            return np.sqrt(gain), np.zeros_like(gain)
        los = np.sqrt(self.rician_factor * gain / (1.0 + self.rician_factor))
        scatter = np.sqrt(gain / (1.0 + self.rician_factor))
        return los, scatter

    def los_vector(self):
        return np.ones(self.num_antennas, dtype=complex)


@dataclass(frozen=True)
class PredictionErrorModel:
    """Standard deviations of the relative prediction errors."""

    arrivals_std: float = 0.0
    wpt_std: float = 0.0
    offload_std: float = 0.0

    def __post_init__(self):
        if min(self.arrivals_std, self.wpt_std, self.offload_std) < 0:
            raise ModelDomainError("prediction error standard deviations must be nonnegative")

    @classmethod
    def uniform(cls, std):
        return cls(std, std, std)


@dataclass(frozen=True)
class PredictedScenario:
    """Predicted arrivals and channels together with the ground truth they were derived from."""

    arrivals: np.ndarray
    wpt_channels: np.ndarray
    offload_channels: np.ndarray
    truth: Scenario

    def __post_init__(self):
        if np.shape(self.arrivals) != self.truth.arrivals.shape:
            raise ModelDomainError("predicted arrivals do not match the true scenario")
        if np.shape(self.wpt_channels) != self.truth.wpt_channels.shape or np.shape(
            self.offload_channels
        ) != self.truth.offload_channels.shape:
            raise ModelDomainError("predicted channels do not match the true scenario")
        if np.any(np.asarray(self.arrivals) < 0):
            raise ModelDomainError("predicted arrivals must be nonnegative")

    @classmethod
    def perfect(cls, truth):
        return cls(truth.arrivals.copy(), truth.wpt_channels.copy(), truth.offload_channels.copy(), truth)


@dataclass(frozen=True)
class ChannelDraw:
    """Channels split into LoS and scatter parts, kept so predictions can perturb the scatter only."""

    wpt_los: np.ndarray
    wpt_scatter: np.ndarray
    offload_los: np.ndarray
    offload_scatter: np.ndarray

    @property
    def wpt(self):
        return self.wpt_los + self.wpt_scatter

    @property
    def offload(self):
        return self.offload_los + self.offload_scatter


def _stream(seed, user, slot, quantity):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(user, slot, quantity)))


def _complex_gaussian(rng, size):
    return (rng.standard_normal(size) + 1j * rng.standard_normal(size)) / np.sqrt(2.0)


def _nonzero_scatter(rng, size):
    draw = _complex_gaussian(rng, size)
    while not np.any(draw):
        draw = _complex_gaussian(rng, size)
    return draw


def draw_channels(seed, geom, num_slots):
    """
    Rician channels with their LoS / scatter decomposition.

    Args:
        seed (int): Master seed
        geom (ChannelGeometry): Propagation geometry
        num_slots (int): Horizon length N

    Returns:
        ChannelDraw: Arrays of shape (K, N, N_t)
    """
    num_users, num_antennas = geom.num_users, geom.num_antennas
    los_weight, scatter_weight = geom.weights()
    los = geom.los_vector()
    shape = (num_users, num_slots, num_antennas)
    wpt_scatter = np.zeros(shape, dtype=complex)
    offload_scatter = np.zeros(shape, dtype=complex)
    for k in range(num_users):
        for i in range(num_slots):
            wpt_scatter[k, i] = scatter_weight[k] * _nonzero_scatter(_stream(seed, k, i, WPT_SCATTER), num_antennas)
            offload_scatter[k, i] = scatter_weight[k] * _nonzero_scatter(
                _stream(seed, k, i, OFFLOAD_SCATTER), num_antennas
            )
    los_part = np.broadcast_to(los_weight[:, None, None] * los[None, None, :], shape).copy()
    return ChannelDraw(los_part, wpt_scatter, los_part.copy(), offload_scatter)


def gen_channels(seed, geom, params):
    """
    Distance-dependent Rician fading channels for WPT and offloading.

    Args:
        seed (int): Master seed
        geom (ChannelGeometry): Propagation geometry
        params (SystemParams): System parameters (K, N and N_t are taken from here)

    Returns:
        tuple: (wpt_channels, offload_channels), each of shape (K, N, N_t)
    """
    if geom.num_users != params.num_users or geom.num_antennas != params.num_antennas:
        raise ModelDomainError("geometry does not match the system parameters")
    draw = draw_channels(seed, geom, params.num_slots)
    return draw.wpt, draw.offload


def gen_tasks(seed, low, high, params):
    """
    I.i.d. uniform task arrivals on [low, high] bits.

    Args:
        seed (int): Master seed
        low (float): Lower bound in bits
        high (float): Upper bound in bits
        params (SystemParams): System parameters

    Returns:
        numpy.ndarray: Arrivals of shape (K, N)
    """
    if low < 0 or low > high:
        raise ModelDomainError(f"invalid arrival interval [{low}, {high}]")
    arrivals = np.empty((params.num_users, params.num_slots))
    for k in range(params.num_users):
        for i in range(params.num_slots):
            arrivals[k, i] = _stream(seed, k, i, ARRIVALS).uniform(low, high)
    return arrivals


def gen_scenario(seed, geom, params, low, high):
    """Ground-truth scenario and the channel decomposition it came from."""
    draw = draw_channels(seed, geom, params.num_slots)
    scen = Scenario(gen_tasks(seed, low, high, params), draw.wpt, draw.offload)
    return scen, draw


def gen_predictions(truth, err, geom, seed, draw=None):
    """
    Predicted task and channel information with relative Gaussian errors.

    Arrivals are perturbed multiplicatively and clamped at zero. For channels
    the LoS part is known exactly and each scatter entry is scaled by
    (1 + delta) with delta circularly-symmetric complex Gaussian.

    Args:
        truth (Scenario): Ground truth
        err (PredictionErrorModel): Error magnitudes
        geom (ChannelGeometry): Geometry used to split LoS and scatter parts
        seed (int): Master seed for the error draws
        draw (ChannelDraw, optional): Exact decomposition of the truth; rebuilt from geom otherwise

    Returns:
        PredictedScenario: Predictions paired with the truth
    """
    num_users, num_slots, num_antennas = truth.wpt_channels.shape
    if draw is None:
        los_weight, _ = geom.weights()
        los = np.broadcast_to(los_weight[:, None, None] * geom.los_vector()[None, None, :], truth.wpt_channels.shape)
        draw = ChannelDraw(los, truth.wpt_channels - los, los, truth.offload_channels - los)

    arrivals = truth.arrivals.copy()
    wpt = truth.wpt_channels.copy()
    offload = truth.offload_channels.copy()
    for k in range(num_users):
        for i in range(num_slots):
            if err.arrivals_std > 0:
                delta = err.arrivals_std * _stream(seed, k, i, ARRIVAL_ERROR).standard_normal()
                arrivals[k, i] = max(0.0, (1.0 + delta) * truth.arrivals[k, i])
            if err.wpt_std > 0:
                delta = err.wpt_std * _complex_gaussian(_stream(seed, k, i, WPT_ERROR), num_antennas)
                wpt[k, i] = draw.wpt_los[k, i] + (1.0 + delta) * draw.wpt_scatter[k, i]
            if err.offload_std > 0:
                delta = err.offload_std * _complex_gaussian(_stream(seed, k, i, OFFLOAD_ERROR), num_antennas)
                offload[k, i] = draw.offload_los[k, i] + (1.0 + delta) * draw.offload_scatter[k, i]
    # A perturbed channel can only vanish on a null-measure event; fall back to the truth there
    wpt_zero = np.sum(np.abs(wpt) ** 2, axis=-1) <= 0
    offload_zero = np.sum(np.abs(offload) ** 2, axis=-1) <= 0
    wpt[wpt_zero] = truth.wpt_channels[wpt_zero]
    offload[offload_zero] = truth.offload_channels[offload_zero]
    return PredictedScenario(arrivals, wpt, offload, truth)
