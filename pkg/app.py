"""
Main entry point for the wireless powered MEC scheduler.

This is the command-line application: it sets up logging and dispatches to
the offline solver, the online sliding-window scheduler, the benchmark
schemes, or the Monte-Carlo experiment harness.
"""

import argparse
import logging
import os
import sys

# Add the project root to the Python path
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from src.components.dual_solver import EllipsoidOptions
from src.components.scenario import gen_predictions, gen_scenario
from src.experiments.harness import (
    ExperimentConfig,
    emit_csv,
    emit_plot_data,
    parse_scheme,
    run_experiment,
    with_overrides,
)
from src.schemes.baselines import BaselineKind, solve_baseline
from src.schemes.offline import solve_offline
from src.schemes.online import solve_sliding_window
from src.utils.config import EXPERIMENT_PRESETS, OUTPUT_DIR, configure_logging, default_params
from src.utils.data_loader import (
    load_experiment_config,
    load_json,
    save_json,
    scenario_from_dict,
    scenario_to_dict,
    solution_to_dict,
    window_log_to_csv,
)

logger = logging.getLogger("app")


def build_parser():
    parser = argparse.ArgumentParser(description="Energy-minimizing scheduler for wireless powered MEC")
    parser.add_argument("--log-level", default=None, help="Logging level (default: WPMEC_LOG_LEVEL)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON configuration mirroring ExperimentConfig")
        p.add_argument("--seed", type=int, default=None, help="Base seed")
        p.add_argument("--out", default=None, help="Output file or directory")

    p = sub.add_parser("solve-offline", help="Solve the offline problem on one scenario")
    common(p)
    p.add_argument("--scenario", help="Scenario JSON; generated from the configuration otherwise")

    p = sub.add_parser("solve-online", help="Run the sliding-window scheduler on one scenario")
    common(p)
    p.add_argument("--scenario", help="Scenario JSON; generated from the configuration otherwise")
    p.add_argument("--window", type=int, default=None, help="Window size M")
    p.add_argument("--sigma", type=float, default=None, help="Prediction error standard deviation")

    p = sub.add_parser("solve-baseline", help="Run a benchmark scheme on one scenario")
    common(p)
    p.add_argument("--scenario", help="Scenario JSON; generated from the configuration otherwise")
    p.add_argument("--scheme", required=True, choices=[kind.value for kind in BaselineKind])

    p = sub.add_parser("experiment", help="Run a Monte-Carlo experiment family")
    common(p)
    p.add_argument("--family", choices=sorted(EXPERIMENT_PRESETS), help="Preset experiment family")
    p.add_argument("--trials", type=int, default=None, help="Trials per sweep point")
    p.add_argument("--workers", type=int, default=None, help="Worker processes")
    p.add_argument("--no-timing", action="store_true", help="Write zero runtimes for reproducible CSVs")
    return parser


def load_config(args):
    """Configuration from --config or --family, with command-line overrides."""
    if args.config:
        cfg = load_experiment_config(args.config)
    elif getattr(args, "family", None):
        cfg = ExperimentConfig.from_preset(args.family)
    else:
        cfg = ExperimentConfig.from_preset("trace")
    return with_overrides(
        cfg,
        seed=args.seed,
        trials=getattr(args, "trials", None),
        workers=getattr(args, "workers", None),
        window=getattr(args, "window", None),
        error_std=getattr(args, "sigma", None),
        record_runtime=False if getattr(args, "no_timing", False) else None,
    )


def load_scenario(args, cfg):
    """Scenario, system parameters, geometry and channel draw for the solve commands."""
    params, geom, (low, high), _ = cfg.setting(cfg.sweep[0])
    if args.scenario:
        scen = scenario_from_dict(load_json(args.scenario))
        params = default_params(scen.num_users, scen.num_slots, cfg.slot_duration, num_antennas=scen.num_antennas)
        return scen, params, None, None
    scen, draw = gen_scenario(cfg.seed, geom, params, low, high)
    return scen, params, geom, draw


def write_solution(args, default_name, scen, solution):
    path = args.out or os.path.join(OUTPUT_DIR, default_name)
    data = solution_to_dict(solution)
    data["scenario"] = scenario_to_dict(scen)
    save_json(data, path)
    logger.info("Objective %.6g J written to %s", solution.objective, path)
    return path


def cmd_solve_offline(args):
    cfg = load_config(args)
    scen, params, _, _ = load_scenario(args, cfg)
    solution = solve_offline(scen, params, EllipsoidOptions(relative_accuracy=cfg.relative_accuracy))
    write_solution(args, "offline.json", scen, solution)


def cmd_solve_online(args):
    cfg = load_config(args)
    scen, params, geom, draw = load_scenario(args, cfg)
    if geom is None:
        geom = cfg.setting(cfg.sweep[0])[1]
        if geom.num_users != scen.num_users:
            raise ValueError("configuration geometry does not match the scenario; set num_users in --config")
    predicted = gen_predictions(scen, cfg.error_model(cfg.sweep[0], parse_scheme("online")), geom, cfg.seed, draw)
    result = solve_sliding_window(scen, predicted, min(cfg.window, params.num_slots), params,
                                  EllipsoidOptions(relative_accuracy=cfg.relative_accuracy))
    path = write_solution(args, "online.json", scen, result)
    window_log_to_csv(result.logs, os.path.splitext(path)[0] + "_slots.csv")


def cmd_solve_baseline(args):
    cfg = load_config(args)
    scen, params, _, _ = load_scenario(args, cfg)
    solution = solve_baseline(args.scheme, scen, params, EllipsoidOptions(relative_accuracy=cfg.relative_accuracy))
    write_solution(args, f"{args.scheme}.json", scen, solution)


def cmd_experiment(args):
    cfg = load_config(args)
    out_dir = args.out or cfg.output_dir or os.path.join(OUTPUT_DIR, cfg.family)
    table = run_experiment(cfg)
    emit_csv(table, os.path.join(out_dir, "results.csv"))
    emit_plot_data(table, out_dir, title=cfg.family)
    failed = sum(table.failures.values())
    logger.info("Results written to %s (%d failed runs)", out_dir, failed)


COMMANDS = {
    "solve-offline": cmd_solve_offline,
    "solve-online": cmd_solve_online,
    "solve-baseline": cmd_solve_baseline,
    "experiment": cmd_experiment,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        COMMANDS[args.command](args)
    except Exception as e:
        logger.error("%s failed: %s", args.command, e)
        logger.debug("Traceback", exc_info=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
