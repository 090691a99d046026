"""
Monte-Carlo experiment harness.

Runs the schemes of an experiment family over a sweep grid, averages the
per-slot AP energy over seeded trials and emits the aggregated results as CSV
and plot data. Trials are independent and run on a bounded process pool;
results are merged in trial order so the output does not depend on the
number of workers.
"""

import logging
import os
import re
import time
from concurrent.futures import FIRST_COMPLETED, ProcessPoolExecutor, wait
from dataclasses import dataclass, field, fields, replace
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import plotly.graph_objects as go

from src.components.dual_solver import EllipsoidOptions
from src.components.instance import ExecutionMode
from src.components.model import check_feasibility
from src.components.scenario import PredictionErrorModel, gen_predictions, gen_scenario
from src.schemes.baselines import BaselineKind, solve_baseline
from src.schemes.offline import solve_offline
from src.schemes.online import solve_sliding_window
from src.utils.config import (
    DEFAULT_SEED,
    DEFAULT_TRIALS,
    DEFAULT_WORKERS,
    EXPERIMENT_PRESETS,
    MBITS,
    PREDICTION_ERROR_STD,
    REFERENCE_PATHLOSS_DB,
    RELATIVE_ACCURACY,
    SLOT_DURATION,
    TASK_BITS_HIGH,
    TASK_BITS_LOW,
    TIMEOUT_GRACE_S,
    TRIAL_TIMEOUT_S,
    USER_DISTANCE,
    db_to_linear,
    default_geometry,
    default_params,
)
from src.utils.errors import ModelDomainError, TrialTimeoutError

logger = logging.getLogger(__name__)

CSV_COLUMNS = ["sweep", "scheme", "mean_energy_J", "stderr", "trials", "runtime_s"]
SWEEP_PARAMETERS = (None, "arrival_mean", "num_slots", "window", "sigma")
ONLINE_SCHEMES = {
    "online": ExecutionMode.JOINT,
    "online-local": ExecutionMode.LOCAL_ONLY,
    "online-offload": ExecutionMode.FULL_OFFLOAD,
    "online-myopic": ExecutionMode.JOINT,
}
SIGMA_SCHEME = re.compile(r"^online-M(\d+)-sigma([AHG])$")
POLL_INTERVAL_S = 0.5


@dataclass(frozen=True)
class SchemeSpec:
    """Parsed scheme name; window None means the configured window, target names the swept error."""

    name: str
    online: bool
    mode: ExecutionMode = ExecutionMode.JOINT
    window: Optional[int] = None
    error_target: Optional[str] = None


def parse_scheme(name):
    """
    Parse a scheme name.

    Offline names are "offline", "local-only", "full-offload" and "myopic";
    online names are "online", "online-local", "online-offload",
    "online-myopic" (window 1) and "online-M<m>-sigma<A|H|G>".
    """
    if name == "offline" or name in {kind.value for kind in BaselineKind}:
        return SchemeSpec(name, online=False)
    if name in ONLINE_SCHEMES:
        return SchemeSpec(name, True, ONLINE_SCHEMES[name], 1 if name == "online-myopic" else None)
    match = SIGMA_SCHEME.match(name)
    if match:
        return SchemeSpec(name, True, ExecutionMode.JOINT, int(match.group(1)), match.group(2))
    raise ModelDomainError(f"unknown scheme {name!r}")


@dataclass
class ExperimentConfig:
    family: str = "custom"
    sweep: Sequence = (0,)
    sweep_parameter: Optional[str] = None
    schemes: Sequence[str] = ("offline",)
    trials: int = DEFAULT_TRIALS
    seed: int = DEFAULT_SEED
    num_users: int = 4
    num_slots: Optional[int] = 10
    slot_duration: float = SLOT_DURATION
    distance: float = USER_DISTANCE
    reference_pathloss_db: float = REFERENCE_PATHLOSS_DB
    arrival_range: Optional[Sequence[float]] = (TASK_BITS_LOW, TASK_BITS_HIGH)
    window: int = 2
    error_std: float = PREDICTION_ERROR_STD
    relative_accuracy: float = RELATIVE_ACCURACY
    workers: int = DEFAULT_WORKERS
    trial_timeout: float = TRIAL_TIMEOUT_S
    record_runtime: bool = True
    output_dir: Optional[str] = None

    def __post_init__(self):
        self.sweep = list(self.sweep)
        self.schemes = list(self.schemes)
        if self.arrival_range is not None:
            self.arrival_range = tuple(float(v) for v in self.arrival_range)
        if self.trials < 1:
            raise ModelDomainError("trials must be at least 1")
        if self.workers < 1:
            raise ModelDomainError("workers must be at least 1")
        if self.trial_timeout <= 0:
            raise ModelDomainError("trial_timeout must be positive")
        if not self.sweep:
            raise ModelDomainError("sweep grid must be nonempty")
        if not self.schemes:
            raise ModelDomainError("at least one scheme is required")
        if self.sweep_parameter not in SWEEP_PARAMETERS:
            raise ModelDomainError(f"unknown sweep parameter {self.sweep_parameter!r}")
        if self.num_slots is None and self.sweep_parameter != "num_slots":
            raise ModelDomainError("num_slots may only be omitted when it is swept")
        if self.arrival_range is None and self.sweep_parameter != "arrival_mean":
            raise ModelDomainError("arrival_range may only be omitted when the arrival mean is swept")
        for name in self.schemes:
            parse_scheme(name)

    @classmethod
    def from_preset(cls, family, **overrides):
        """
        Configuration of a preset experiment family.

        Args:
            family (str): Key of EXPERIMENT_PRESETS
            **overrides: Fields to replace, e.g. trials or seed

        Returns:
            ExperimentConfig: Validated configuration
        """
        if family not in EXPERIMENT_PRESETS:
            raise ModelDomainError(f"unknown experiment family {family!r}")
        values = dict(EXPERIMENT_PRESETS[family])
        values.update(overrides)
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ModelDomainError(f"unknown configuration fields: {sorted(unknown)}")
        return cls(family=family, **values)

    def setting(self, value):
        """
        Parameters of one sweep point.

        Returns:
            tuple: (SystemParams, ChannelGeometry, (low, high) arrival bounds in bits, window size)
        """
        num_slots = int(value) if self.sweep_parameter == "num_slots" else self.num_slots
        window = int(value) if self.sweep_parameter == "window" else self.window
        if self.sweep_parameter == "arrival_mean":
            bounds = (0.0, 2.0 * float(value) * MBITS)
        else:
            bounds = self.arrival_range
        params = default_params(self.num_users, num_slots, self.slot_duration)
        geom = default_geometry(self.num_users, self.distance,
                                reference_pathloss=db_to_linear(self.reference_pathloss_db))
        return params, geom, bounds, min(window, num_slots)

    def error_model(self, value, spec):
        """Prediction errors seen by a scheme at a sweep point."""
        if self.sweep_parameter == "sigma" and spec.error_target is not None:
            stds = {"A": self.error_std, "H": self.error_std, "G": self.error_std}
            stds[spec.error_target] = float(value)
            return PredictionErrorModel(stds["A"], stds["H"], stds["G"])
        if self.sweep_parameter == "sigma":
            return PredictionErrorModel.uniform(float(value))
        return PredictionErrorModel.uniform(self.error_std)


@dataclass
class TrialRecord:
    sweep: float
    scheme: str
    trial: int
    energy_per_slot: float
    runtime_s: float
    error: Optional[str] = None


@dataclass
class ResultTable:
    """Aggregated results (CSV_COLUMNS), failure counts per (sweep, scheme) and the optional trace."""

    frame: pd.DataFrame
    failures: Dict[tuple, int] = field(default_factory=dict)
    records: List[TrialRecord] = field(default_factory=list)
    trace: Optional[pd.DataFrame] = None

    def series(self, scheme):
        return self.frame[self.frame["scheme"] == scheme].reset_index(drop=True)


def trial_seed(base_seed, trial):
    """Seed of one trial; shared across sweep points and schemes."""
    return int(np.random.SeedSequence(base_seed, spawn_key=(trial,)).generate_state(1)[0])


def _audit(alloc, scen, params):
    report = check_feasibility(alloc, scen, params)
    if report.energy_harvesting > report.energy_tolerance:
        raise RuntimeError(f"energy conservation audit failed by {report.energy_harvesting:.3g} J")
    if not report.feasible:
        raise RuntimeError(f"infeasible trajectory: {report.violations()}")


def run_scheme(spec, scen, draw, geom, params, window, cfg, value, seed, deadline=None):
    """
    Run one scheme on one scenario.

    Args:
        deadline (float, optional): time.monotonic() instant after which the ellipsoid aborts

    Returns:
        OfflineSolution | OnlineResult: Solved schedule
    """
    opts = EllipsoidOptions(relative_accuracy=cfg.relative_accuracy, deadline=deadline)
    if not spec.online:
        if spec.name == "offline":
            return solve_offline(scen, params, opts)
        return solve_baseline(spec.name, scen, params, opts)
    predicted = gen_predictions(scen, cfg.error_model(value, spec), geom, seed, draw)
    size = min(spec.window or window, params.num_slots)
    return solve_sliding_window(scen, predicted, size, params, opts, mode=spec.mode)


def run_trial(cfg, sweep_index, trial):
    """
    Every scheme of the configuration on one seeded scenario.

    Failures are recorded per scheme and do not stop the other schemes. The
    trial has cfg.trial_timeout seconds from its own start: a scheme still
    running at the deadline is aborted at its next ellipsoid iteration, a
    scheme finishing late is discarded, and schemes not yet started are skipped.

    Returns:
        list: One TrialRecord per scheme
    """
    value = cfg.sweep[sweep_index]
    deadline = time.monotonic() + cfg.trial_timeout
    params, geom, (low, high), window = cfg.setting(value)
    seed = trial_seed(cfg.seed, trial)
    scen, draw = gen_scenario(seed, geom, params, low, high)
    records = []
    for name in cfg.schemes:
        start = time.perf_counter()
        try:
            if time.monotonic() > deadline:
                raise TrialTimeoutError("trial deadline passed before the scheme started")
            result = run_scheme(parse_scheme(name), scen, draw, geom, params, window, cfg, value, seed, deadline)
            if time.monotonic() > deadline:
                raise TrialTimeoutError("scheme finished after the trial deadline")
            _audit(result.allocation, scen, params)
            energy, error = result.objective / params.num_slots, None
        except TrialTimeoutError as e:
            logger.warning("Trial %d of %s at %s=%s exceeded %.0f s: %s", trial, name, cfg.sweep_parameter, value,
                           cfg.trial_timeout, e)
            energy, error = float("nan"), "timeout"
        except Exception as e:
            logger.warning("Trial %d of %s at %s=%s failed: %s", trial, name, cfg.sweep_parameter, value, e)
            energy, error = float("nan"), str(e) or type(e).__name__
        runtime = time.perf_counter() - start if cfg.record_runtime else 0.0
        records.append(TrialRecord(value, name, trial, energy, runtime, error))
    return records


def _failed(cfg, sweep_index, trial, reason):
    value = cfg.sweep[sweep_index]
    return [TrialRecord(value, name, trial, float("nan"), 0.0, reason) for name in cfg.schemes]


def _terminate(pool):
    """Stop a pool without waiting for its running trials."""
    processes = list((pool._processes or {}).values())
    pool.shutdown(wait=False, cancel_futures=True)
    for process in processes:
        if process.is_alive():
            process.terminate()


def _run_pool(cfg, jobs, outcome, limit):
    """
    Run jobs on a fresh pool until they finish or one overruns `limit` seconds.

    A trial that overruns is recorded as a timeout and the pool is terminated.

    Returns:
        list: Jobs that did not finish and must be resubmitted
    """
    pool = ProcessPoolExecutor(max_workers=cfg.workers)
    futures = {pool.submit(run_trial, cfg, s, t): (s, t) for s, t in jobs}
    pending, started = set(futures), {}
    while pending:
        done, pending = wait(pending, timeout=POLL_INTERVAL_S, return_when=FIRST_COMPLETED)
        for future in done:
            s, t = futures[future]
            try:
                outcome[(s, t)] = future.result()
            except Exception as e:
                logger.warning("Trial %d at sweep index %d crashed: %s", t, s, e)
                outcome[(s, t)] = _failed(cfg, s, t, str(e) or type(e).__name__)
        now = time.monotonic()
        overdue = []
        for future in pending:
            if future.running():
                started.setdefault(future, now)
                if now - started[future] > limit:
                    overdue.append(future)
        if overdue:
            for future in overdue:
                s, t = futures[future]
                logger.warning("Trial %d at sweep index %d ran past %.0f s, terminating the pool", t, s, limit)
                outcome[(s, t)] = _failed(cfg, s, t, "timeout")
            _terminate(pool)
            return [futures[future] for future in pending if future not in overdue]
    pool.shutdown(wait=True)
    return []


def _collect(cfg, jobs):
    if cfg.workers <= 1:
        return [run_trial(cfg, s, t) for s, t in jobs]
    # run_trial enforces its own deadline; the pool limit only catches a solve that never returns
    limit = cfg.trial_timeout + TIMEOUT_GRACE_S
    outcome = {}
    remaining = list(jobs)
    while remaining:
        remaining = _run_pool(cfg, remaining, outcome, limit)
    return [outcome[job] for job in jobs]


def aggregate(cfg, records):
    """Mean and standard error of the per-slot energy per (sweep, scheme), in configuration order."""
    rows, failures = [], {}
    for value in cfg.sweep:
        for name in cfg.schemes:
            matching = [r for r in records if r.sweep == value and r.scheme == name]
            ok = [r for r in matching if r.error is None]
            failures[(value, name)] = len(matching) - len(ok)
            energies = np.array([r.energy_per_slot for r in ok])
            if ok:
                mean = float(np.mean(energies))
                stderr = float(np.std(energies, ddof=1) / np.sqrt(len(ok))) if len(ok) > 1 else 0.0
                runtime = float(np.mean([r.runtime_s for r in ok]))
            else:
                mean, stderr, runtime = float("nan"), float("nan"), 0.0
            rows.append((value, name, mean, stderr, len(ok), runtime))
    return pd.DataFrame(rows, columns=CSV_COLUMNS), failures


def run_trace(cfg):
    """
    Per-slot trace of the offline design on a single channel realization.

    Returns:
        pandas.DataFrame: One row per (slot, user) with bits, gains and transmit power
    """
    params, geom, (low, high), _ = cfg.setting(cfg.sweep[0])
    scen, _ = gen_scenario(cfg.seed, geom, params, low, high)
    sol = solve_offline(scen, params, EllipsoidOptions(relative_accuracy=cfg.relative_accuracy))
    alloc = sol.allocation
    powers = alloc.transmit_powers()
    rows = []
    for i in range(params.num_slots):
        for k in range(params.num_users):
            rows.append({
                "slot": i,
                "user": k,
                "arrival_bits": scen.arrivals[k, i],
                "local_bits": alloc.local_bits[k, i],
                "offload_bits": alloc.offload_bits[k, i],
                "mec_bits": alloc.mec_bits[i],
                "wpt_gain": scen.wpt_gains[k, i],
                "offload_gain": scen.offload_gains[k, i],
                "transmit_power_W": powers[i],
            })
    return pd.DataFrame(rows)


def run_experiment(cfg):
    """
    Run an experiment family.

    Args:
        cfg (ExperimentConfig): Experiment configuration

    Returns:
        ResultTable: Aggregated per-slot energies, failure counts and, for the trace family, the per-slot trace
    """
    start = time.perf_counter()
    jobs = [(s, t) for s in range(len(cfg.sweep)) for t in range(cfg.trials)]
    logger.info("Experiment %s: %d sweep points x %d trials, schemes %s, %d worker(s)",
                cfg.family, len(cfg.sweep), cfg.trials, ", ".join(cfg.schemes), cfg.workers)
    records = [record for batch in _collect(cfg, jobs) for record in batch]
    frame, failures = aggregate(cfg, records)
    failed = sum(failures.values())
    if failed:
        logger.warning("Experiment %s: %d failed scheme runs excluded", cfg.family, failed)
    trace = run_trace(cfg) if cfg.family == "trace" else None
    logger.info("Experiment %s finished in %.1f s", cfg.family, time.perf_counter() - start)
    return ResultTable(frame, failures, records, trace)


def emit_csv(table, path):
    """
    Write the aggregated results with the fixed header.

    Args:
        table (ResultTable): Results to write
        path (str): Output CSV path

    Returns:
        str: The path written
    """
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    table.frame.to_csv(path, index=False, columns=CSV_COLUMNS, float_format="%.9g")
    return path


def build_figure(table, title=None):
    """Plotly figure of mean energy per slot versus the sweep value, one trace per scheme."""
    fig = go.Figure()
    for scheme in table.frame["scheme"].unique():
        series = table.series(scheme)
        fig.add_trace(go.Scatter(
            x=series["sweep"],
            y=series["mean_energy_J"],
            error_y=dict(type="data", array=series["stderr"], visible=True),
            mode="lines+markers",
            name=scheme,
        ))
    fig.update_layout(
        title=title,
        xaxis_title="Sweep value",
        yaxis_title="Average energy consumption at the AP per slot (J)",
    )
    return fig


def emit_plot_data(table, directory, title=None):
    """
    Write per-scheme series CSVs, the trace (if any) and a plotly figure JSON.

    Args:
        table (ResultTable): Results to write
        directory (str): Output directory
        title (str, optional): Figure title

    Returns:
        list: Paths written
    """
    os.makedirs(directory, exist_ok=True)
    paths = []
    for scheme in table.frame["scheme"].unique():
        path = os.path.join(directory, f"series_{scheme}.csv")
        table.series(scheme)[["sweep", "mean_energy_J", "stderr"]].to_csv(path, index=False, float_format="%.9g")
        paths.append(path)
    if table.trace is not None:
        path = os.path.join(directory, "trace.csv")
        table.trace.to_csv(path, index=False, float_format="%.9g")
        paths.append(path)
    path = os.path.join(directory, "figure.json")
    with open(path, "w", encoding="utf-8") as f:
        f.write(build_figure(table, title).to_json())
    paths.append(path)
    return paths


def with_overrides(cfg, **overrides):
    """Copy of a configuration with the non-None overrides applied."""
    return replace(cfg, **{key: value for key, value in overrides.items() if value is not None})
