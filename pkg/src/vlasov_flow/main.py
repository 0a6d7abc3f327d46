#!/usr/bin/env python3
"""
VlasovFlow - Lagrangian Vlasov-Poisson simulator
Main entry point for the command-line interface.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

# Initialize logging first
from vlasov_flow.utils import logger

from vlasov_flow.errors import VlasovFlowError
from vlasov_flow.run_controller import RunController, RunResult
from vlasov_flow.utils.config import RunConfig, load_config, with_overrides
from vlasov_flow.utils.hardware_detect import detect_hardware, get_tier_description

EXIT_OK = 0
EXIT_USAGE = 2

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


def _common_parser() -> argparse.ArgumentParser:
    """Flags shared by every subcommand; unset flags keep the config-file value."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat JSON config file")
    common.add_argument("--scenario", help="scenario preset (see data/scenarios.json)")
    common.add_argument("--dt", type=float, help="time step")
    common.add_argument("--t-end", dest="t_end", type=float, help="final time")
    common.add_argument("--particles", type=int, help="number of quasi-random samples")
    common.add_argument("--mollify-n", dest="mollify_n", type=float,
                        help="kernel mollification parameter n (radius 1/n)")
    common.add_argument("--escape-radius", dest="escape_radius", type=float,
                        help="phase-space radius beyond which particles escape")
    common.add_argument("--cadence", type=int, help="diagnostics every N steps")
    common.add_argument("--checkpoint-every", dest="checkpoint_every", type=int,
                        help="checkpoint every N steps (0 = end only)")
    common.add_argument("--grid-cells", dest="grid_cells", type=int,
                        help="field grid cells per axis")
    common.add_argument("--nx", dest="eulerian_nx", type=int, help="phase grid x nodes")
    common.add_argument("--nv", dest="eulerian_nv", type=int, help="phase grid v nodes")
    common.add_argument("--seed", type=int, help="sampler seed")
    common.add_argument("--workers", type=int, help="FFT worker threads")
    common.add_argument("--out", help="output directory")
    common.add_argument("--log-level", dest="log_level", default="INFO",
                        choices=LOG_LEVELS, help="console and file log level")
    common.add_argument("--no-log-file", dest="no_log_file", action="store_true",
                        help="do not write a log file under <out>/logs")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(
        prog="vlasovflow",
        description="Lagrangian particle and phase-grid solvers for Vlasov-Poisson",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", parents=[common], help="Lagrangian particle run")
    run.add_argument("--restart", type=Path, help="checkpoint file or run directory")
    run.add_argument("--backward", action="store_true", default=None,
                     help="integrate backward in time")

    sub.add_parser("run-eulerian", parents=[common], help="semi-Lagrangian phase-grid run")

    compare = sub.add_parser("compare", parents=[common],
                             help="L1 distance between a particle run and a phase-grid run")
    compare.add_argument("--lagrangian", type=Path, required=True,
                         help="particle run directory or checkpoint")
    compare.add_argument("--eulerian", type=Path, required=True,
                         help="phase-grid run directory or snapshot")

    diagnose = sub.add_parser("diagnose", parents=[common],
                              help="recompute diagnostics from checkpoints")
    diagnose.add_argument("--run-dir", dest="run_dir", type=Path, required=True)

    sub.add_parser("compactify-demo", parents=[common],
                   help="sphere integration of a blow-up field and gradient checks")
    sub.add_parser("kernel-check", parents=[common], help="flux oracles for the kernels")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Config file (or defaults) with the command-line flags applied on top."""
    config = load_config(args.config)
    overrides = {
        name: getattr(args, name, None)
        for name in ("scenario", "dt", "t_end", "particles", "mollify_n", "escape_radius",
                     "cadence", "checkpoint_every", "grid_cells", "eulerian_nx",
                     "eulerian_nv", "seed", "workers", "out", "backward")
    }
    if getattr(args, "no_log_file", False):
        overrides["logging_enabled"] = False
    return with_overrides(config, **overrides)


def dispatch(args: argparse.Namespace, controller: RunController) -> RunResult:
    if args.command == "run":
        return controller.run_lagrangian(restart=args.restart)
    if args.command == "run-eulerian":
        return controller.run_eulerian()
    if args.command == "compare":
        return controller.compare(args.lagrangian, args.eulerian)
    if args.command == "diagnose":
        return controller.diagnose(args.run_dir)
    if args.command == "compactify-demo":
        return controller.compactify_demo()
    return controller.kernel_check()


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point; returns the process exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK

    level = getattr(logging, args.log_level)
    logger.setup_logger(enabled=False, level=level)

    try:
        config = resolve_config(args)
        config.validate()
    except VlasovFlowError as e:
        logger.error("Invalid configuration: %s", e)
        return e.exit_code

    logger.setup_logger(enabled=config.logging_enabled, level=level,
                        log_dir=Path(config.out) / "logs")
    logger.info("VlasovFlow %s starting (scenario=%s, out=%s)",
                args.command, config.scenario, config.out)

    hardware = detect_hardware()
    logger.info("Hardware: %s, %s cores, %sGB RAM → Tier %s (%s)", hardware.machine,
                hardware.cpu_count, hardware.ram_gb, hardware.tier,
                get_tier_description(hardware.tier))

    controller = RunController(config, hardware)
    try:
        result = dispatch(args, controller)
    except VlasovFlowError as e:
        logger.error("%s", e)
        return e.exit_code

    if result.success:
        logger.info("%s", result.message)
    else:
        logger.error("%s: %s", result.message, result.error)
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
