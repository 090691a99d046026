"""
Configuration settings for the wireless powered MEC scheduler.

This module contains the physical constants of the simulated system, solver
defaults, experiment presets and the environment overrides used throughout
the application.
"""

import logging
import os

from dotenv import load_dotenv

# Load environment variables
load_dotenv()

# Run-time overrides
DEFAULT_SEED = int(os.getenv("WPMEC_SEED", "2024"))
DEFAULT_TRIALS = int(os.getenv("WPMEC_TRIALS", "100"))
DEFAULT_WORKERS = int(os.getenv("WPMEC_WORKERS", str(max(1, (os.cpu_count() or 2) - 1))))
OUTPUT_DIR = os.getenv("WPMEC_OUTPUT_DIR", "results")
LOG_LEVEL = os.getenv("WPMEC_LOG_LEVEL", "INFO")
TRIAL_TIMEOUT_S = float(os.getenv("WPMEC_TRIAL_TIMEOUT", "600"))

# Simulation parameters (system defaults)
HARVEST_EFFICIENCY = 0.3
AP_CYCLES_PER_BIT = 1e3
USER_CYCLES_PER_BIT = 1e3
NUM_ANTENNAS = 4
PATHLOSS_EXPONENT = 3.0
AP_CAPACITANCE = 1e-29
USER_CAPACITANCE = 1e-28
TASK_BITS_LOW = 5e5
TASK_BITS_HIGH = 1e6
NOISE_POWER = 1e-9
RICIAN_FACTOR = 3.0
BANDWIDTH = 2e6
PREDICTION_ERROR_STD = 0.2
REFERENCE_PATHLOSS_DB = -32.0
SLOT_DURATION = 0.02
USER_DISTANCE = 3.0

# Solver defaults
STAGNATION_WINDOW = 50
RELATIVE_ACCURACY = 1e-4
LAMBDA_FLOOR_SCALE = 1e-10
WPT_TOLERANCE = 1e-6
PRIMAL_RESIDUAL_TOLERANCE = 1e-6
REPAIR_TOLERANCE = 1e-9
TIMEOUT_GRACE_S = 30.0
FEASIBILITY_TOLERANCE = 1e-6
ITERATIONS_PER_DIMENSION_SQ = 60
MIN_ITERATIONS = 5000

MBITS = 1e6

# Experiment presets, one per experiment family
EXPERIMENT_PRESETS = {
    "trace": {
        "num_users": 3,
        "num_slots": 15,
        "slot_duration": 0.02,
        "distance": 3.0,
        "arrival_range": (TASK_BITS_LOW, TASK_BITS_HIGH),
        "sweep": [0],
        "sweep_parameter": None,
        "schemes": ["offline"],
        "trials": 1,
        "seed": 7,
    },
    "vs_arrival_mean": {
        "num_users": 6,
        "num_slots": 20,
        "slot_duration": 0.02,
        "distance": 4.0,
        "arrival_range": None,
        "sweep": [2, 3, 4, 5, 6, 7, 8, 9, 10],
        "sweep_parameter": "arrival_mean",
        "schemes": ["offline", "local-only", "full-offload", "myopic"],
    },
    "vs_horizon": {
        "num_users": 4,
        "num_slots": None,
        "slot_duration": 0.02,
        "distance": 4.0,
        "arrival_range": (0.0, 5.0 * MBITS),
        "sweep": [5, 10, 15, 20, 25, 30],
        "sweep_parameter": "num_slots",
        "schemes": ["offline", "local-only", "full-offload", "myopic"],
    },
    "online_vs_horizon": {
        "num_users": 8,
        "num_slots": None,
        "slot_duration": 0.02,
        "distance": 6.0,
        "arrival_range": (0.0, 8.0 * MBITS),
        "sweep": [10, 15, 20, 25, 30],
        "sweep_parameter": "num_slots",
        "schemes": ["offline", "online", "online-local", "online-offload", "online-myopic"],
        "window": 2,
        "error_std": 0.2,
    },
    "vs_window": {
        "num_users": 8,
        "num_slots": 30,
        "slot_duration": 0.05,
        "distance": 5.0,
        "arrival_range": (1.0 * MBITS, 5.0 * MBITS),
        "sweep": [1, 2, 3, 4, 5, 6, 7, 8],
        "sweep_parameter": "window",
        "schemes": ["offline", "online", "online-local", "online-offload", "online-myopic"],
        "error_std": 0.2,
    },
    "vs_prediction_error": {
        "num_users": 4,
        "num_slots": 20,
        "slot_duration": 0.1,
        "distance": 3.0,
        "arrival_range": (1.0 * MBITS, 4.0 * MBITS),
        "sweep": [0.0, 0.1, 0.2, 0.3],
        "sweep_parameter": "sigma",
        "schemes": [
            "online-M2-sigmaA", "online-M8-sigmaA",
            "online-M2-sigmaH", "online-M8-sigmaH",
            "online-M2-sigmaG", "online-M8-sigmaG",
        ],
        "error_std": 0.1,
    },
}

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging(level=None):
    """
    Install a single stream handler on the root logger.

    Args:
        level (str | int, optional): Logging level, defaults to WPMEC_LOG_LEVEL

    Returns:
        None
    """
    level = level if level is not None else LOG_LEVEL
    if isinstance(level, str):
        level = getattr(logging, level.upper(), logging.INFO)
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(handler)
    root.setLevel(level)


def db_to_linear(value_db):
    """Convert a power ratio in dB to linear scale."""
    return 10.0 ** (value_db / 10.0)


def default_params(num_users, num_slots, slot_duration=SLOT_DURATION, **overrides):
    """
    Build SystemParams populated with the default simulation constants.

    Args:
        num_users (int): Number of users K
        num_slots (int): Horizon length N
        slot_duration (float): Slot duration tau in seconds
        **overrides: Individual SystemParams fields to replace

    Returns:
        SystemParams: Validated parameter set
    """
    from src.components.model import SystemParams

    fields = {
        "num_users": num_users,
        "num_slots": num_slots,
        "num_antennas": NUM_ANTENNAS,
        "slot_duration": slot_duration,
        "bandwidth": BANDWIDTH,
        "noise_power": NOISE_POWER,
        "harvest_efficiency": HARVEST_EFFICIENCY,
        "user_capacitance": USER_CAPACITANCE,
        "user_cycles_per_bit": USER_CYCLES_PER_BIT,
        "ap_capacitance": AP_CAPACITANCE,
        "ap_cycles_per_bit": AP_CYCLES_PER_BIT,
    }
    fields.update(overrides)
    return SystemParams(**fields)


def default_geometry(num_users, distance=USER_DISTANCE, num_antennas=NUM_ANTENNAS, **overrides):
    """
    Build a ChannelGeometry with equal user distances and default propagation constants.

    Args:
        num_users (int): Number of users K
        distance (float): Distance of every user to the AP in meters
        num_antennas (int): Number of AP antennas
        **overrides: Individual ChannelGeometry fields to replace

    Returns:
        ChannelGeometry: Geometry with the reference path loss already in linear scale
    """
    from src.components.scenario import ChannelGeometry

    fields = {
        "distances": [distance] * num_users,
        "pathloss_exponent": PATHLOSS_EXPONENT,
        "reference_pathloss": db_to_linear(REFERENCE_PATHLOSS_DB),
        "rician_factor": RICIAN_FACTOR,
        "num_antennas": num_antennas,
    }
    fields.update(overrides)
    return ChannelGeometry(**fields)
