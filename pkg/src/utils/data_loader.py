"""
Data loading and saving utilities for the wireless powered MEC scheduler.

This module contains functions for reading and writing scenarios,
predictions, solutions, experiment configurations and solver logs. Complex
channels are stored as separate real and imaginary arrays so every file is
plain JSON.
"""

import json
import logging
import os

import numpy as np

from src.components.dual_solver import iteration_log_frame
from src.components.model import Scenario
from src.components.scenario import PredictedScenario
from src.experiments.harness import ExperimentConfig
from src.schemes.online import window_log_frame
from src.utils.errors import ModelDomainError

logger = logging.getLogger(__name__)


def _complex_to_dict(values):
    values = np.asarray(values, dtype=complex)
    return {"real": values.real.tolist(), "imag": values.imag.tolist()}


def _complex_from_dict(data):
    return np.asarray(data["real"], dtype=float) + 1j * np.asarray(data["imag"], dtype=float)


def scenario_to_dict(scen):
    """
    Convert a scenario to a JSON-serializable dictionary.

    Args:
        scen (Scenario): Scenario to convert

    Returns:
        dict: Arrivals in bits and channels split into real and imaginary parts
    """
    return {
        "arrivals": np.asarray(scen.arrivals, dtype=float).tolist(),
        "wpt_channels": _complex_to_dict(scen.wpt_channels),
        "offload_channels": _complex_to_dict(scen.offload_channels),
    }


def scenario_from_dict(data):
    try:
        return Scenario(
            np.asarray(data["arrivals"], dtype=float),
            _complex_from_dict(data["wpt_channels"]),
            _complex_from_dict(data["offload_channels"]),
        )
    except KeyError as e:
        raise ModelDomainError(f"scenario is missing field {e}") from e


def predicted_to_dict(pred):
    return {
        "arrivals": np.asarray(pred.arrivals, dtype=float).tolist(),
        "wpt_channels": _complex_to_dict(pred.wpt_channels),
        "offload_channels": _complex_to_dict(pred.offload_channels),
        "truth": scenario_to_dict(pred.truth),
    }


def predicted_from_dict(data):
    try:
        return PredictedScenario(
            np.asarray(data["arrivals"], dtype=float),
            _complex_from_dict(data["wpt_channels"]),
            _complex_from_dict(data["offload_channels"]),
            scenario_from_dict(data["truth"]),
        )
    except KeyError as e:
        raise ModelDomainError(f"prediction is missing field {e}") from e


def solution_to_dict(solution):
    """
    Summarize a solved schedule for JSON output.

    Works for offline, baseline and online results: anything with an
    `allocation` and an `objective`, plus optional dual and feasibility data.

    Args:
        solution: OfflineSolution or OnlineResult

    Returns:
        dict: Objective, bounds, allocation and feasibility report
    """
    alloc = solution.allocation
    data = {
        "objective_J": float(solution.objective),
        "transmit_power_W": alloc.transmit_powers().tolist(),
        "covariances": _complex_to_dict(alloc.covariances),
        "local_bits": np.asarray(alloc.local_bits).tolist(),
        "offload_bits": np.asarray(alloc.offload_bits).tolist(),
        "mec_bits": np.asarray(alloc.mec_bits).tolist(),
    }
    if hasattr(solution, "dual_value"):
        data["dual_value_J"] = float(solution.dual_value)
        data["duality_gap_J"] = float(solution.duality_gap)
    diagnostics = getattr(solution, "diagnostics", None)
    if diagnostics is not None:
        data["iterations"] = diagnostics.iterations
        data["converged"] = bool(diagnostics.converged)
        data["message"] = diagnostics.message
        if diagnostics.recovery:
            data["recovery"] = diagnostics.recovery
        data["runtime_s"] = diagnostics.runtime_s
    elif hasattr(solution, "logs"):
        data["converged"] = bool(solution.converged)
        data["runtime_s"] = solution.runtime_s
    report = getattr(solution, "feasibility", None)
    if report is None and diagnostics is not None:
        report = diagnostics.feasibility
    if report is not None:
        data["feasible"] = bool(report.feasible)
        data["violations"] = {key: float(value) for key, value in report.violations().items()}
    return data


def save_json(data, path):
    """
    Write a dictionary as indented JSON, creating parent directories.

    Args:
        data (dict): JSON-serializable content
        path (str): Output file path

    Returns:
        str: The path written
    """
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True)
    logger.debug("Wrote %s", path)
    return path


def load_json(path):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def load_experiment_config(path):
    """
    Load an experiment configuration from a JSON file.

    The file either names a preset family ("family") with overrides, or gives
    every field of the configuration.

    Args:
        path (str): Path to the JSON file

    Returns:
        ExperimentConfig: Configuration ready for run_experiment
    """
    data = load_json(path)
    if not isinstance(data, dict):
        raise ModelDomainError(f"{path}: experiment configuration must be a JSON object")
    family = data.pop("family", None)
    if family is not None:
        return ExperimentConfig.from_preset(family, **data)
    try:
        return ExperimentConfig(**data)
    except TypeError as e:
        raise ModelDomainError(f"{path}: {e}") from e


def iteration_log_to_csv(log, path):
    """Write an ellipsoid iteration log as CSV."""
    iteration_log_frame(log).to_csv(path, index=False, float_format="%.9g")
    return path


def window_log_to_csv(logs, path):
    """Write the per-slot online log as CSV."""
    window_log_frame(logs).to_csv(path, index=False, float_format="%.9g")
    return path
