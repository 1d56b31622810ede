"""
swarm-markers - Command Line
simulate | markers | pipeline | export-scenarios
"""

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from dotenv import load_dotenv
from pydantic import ValidationError

from errors import ConfigurationError, SwarmMarkersError
from main import (
    ABLATIONS,
    TARGETS,
    PipelineConfig,
    SwarmMarkerPipeline,
    default_threads,
    markers_to_file,
    simulate_to_file,
)
from marker_kernels import MARKER_SET_23, MARKER_SET_42
from sim_core import ScenarioId, canonical_scenarios, load_scenario, save_scenario
from windowing import WindowPlan

logger = logging.getLogger("swarm_markers")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2


# -------------------------------------------------
# Argument types
# -------------------------------------------------

def eta_value(text: str) -> float:
    try:
        value = float(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"eta must be a number, got {text!r}") from e
    if not 0 < value <= 1:
        raise argparse.ArgumentTypeError(f"eta must be in (0, 1], got {value}")
    return value


def seed_list(text: str) -> List[int]:
    """'1-20', '3' or '1,4,9'."""
    seeds: List[int] = []
    try:
        for part in text.split(","):
            part = part.strip()
            if "-" in part:
                lo, hi = (int(v) for v in part.split("-", 1))
                if hi < lo:
                    raise ValueError(part)
                seeds.extend(range(lo, hi + 1))
            elif part:
                seeds.append(int(part))
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from e
    if not seeds:
        raise argparse.ArgumentTypeError("seed list is empty")
    return seeds


def scenario_list(text: str) -> List[ScenarioId]:
    if text.strip().lower() == "all":
        return list(ScenarioId)
    try:
        return [ScenarioId(part.strip().upper()) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"unknown scenario in {text!r}; use S1..S11 or all") from e


def positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from e
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="swarm-markers", description="Information markers for shepherding swarms")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run one scenario and write its trajectory CSV")
    sim.add_argument("scenario_file", type=Path)
    sim.add_argument("--seed", type=int, default=1)
    sim.add_argument("--out", type=Path, help="trajectory CSV (default: <scenario>_seed<seed>.csv)")

    mk = sub.add_parser("markers", help="compute the feature CSV of one trajectory")
    mk.add_argument("trajectory", type=Path)
    mk.add_argument("--window", type=int, default=20)
    mk.add_argument("--overlap", type=float, default=0.75)
    mk.add_argument("--set", dest="marker_set", choices=["23", "42", "custom"], default="42")
    mk.add_argument("--markers", help="comma-separated marker ids for --set custom")
    mk.add_argument("--out", type=Path, help="feature CSV (default: next to the trajectory)")

    pipe = sub.add_parser("pipeline", help="regenerate data and produce the report tables")
    pipe.add_argument("--scenarios", type=scenario_list, default=list(ScenarioId))
    pipe.add_argument("--seeds", type=seed_list, default=list(range(1, 21)))
    pipe.add_argument("--sweep", action="store_true", help="evaluate all 15 window plans")
    pipe.add_argument("--train", action="append", choices=TARGETS, default=[])
    pipe.add_argument("--ablate", action="append", choices=ABLATIONS, default=[])
    pipe.add_argument("--associate", action="store_true")
    pipe.add_argument("--attention", action="store_true")
    pipe.add_argument("--eta", type=eta_value, default=0.5)
    pipe.add_argument("--set", dest="marker_set", choices=["23", "42"], default="23")
    pipe.add_argument("--folds", type=positive_int, default=10)
    pipe.add_argument("--budget", type=positive_int, default=30)
    pipe.add_argument("--seed", type=int, default=0, help="split, search and clustering seed")
    pipe.add_argument("--threads", type=positive_int, help="worker cap (default: SWARM_MARKERS_THREADS)")
    pipe.add_argument("--regenerate", action="store_true", help="recompute trajectories and features")
    pipe.add_argument("--out", type=Path, help="output directory (default: SWARM_MARKERS_OUTPUT_DIR)")

    exp = sub.add_parser("export-scenarios", help="write the eleven canonical scenario files")
    exp.add_argument("--out", type=Path, default=Path("scenarios"))
    return parser


# -------------------------------------------------
# Commands
# -------------------------------------------------

def cmd_simulate(args: argparse.Namespace) -> int:
    spec = load_scenario(args.scenario_file)
    out = args.out or Path(f"{spec.id.value}_seed{args.seed}.csv")
    simulate_to_file(spec, args.seed, out, scenario_path=args.scenario_file)
    logger.info(f"{spec.id.value} seed {args.seed} -> {out}")
    return EXIT_OK


def _chosen_markers(choice: str, custom: Optional[str]) -> List[str]:
    if choice == "23":
        return list(MARKER_SET_23)
    if choice == "42":
        return list(MARKER_SET_42)
    if not custom:
        raise ConfigurationError("--set custom needs --markers", field="markers")
    return [m.strip() for m in custom.split(",") if m.strip()]


def cmd_markers(args: argparse.Namespace) -> int:
    plan = WindowPlan.create(args.window, args.overlap)
    markers = _chosen_markers(args.marker_set, args.markers)
    out = args.out or args.trajectory.with_name(f"{args.trajectory.stem}_{plan.label}_features.csv")
    markers_to_file(args.trajectory, plan, markers, out)
    return EXIT_OK


def cmd_pipeline(args: argparse.Namespace) -> int:
    out = args.out or Path(os.getenv("SWARM_MARKERS_OUTPUT_DIR", "output"))
    try:
        config = PipelineConfig(
            scenarios=args.scenarios,
            seeds=args.seeds,
            marker_set=list(MARKER_SET_23 if args.marker_set == "23" else MARKER_SET_42),
            run_sweep=args.sweep,
            targets=list(dict.fromkeys(args.train)),
            ablations=list(dict.fromkeys(args.ablate)),
            associate=args.associate,
            attention=args.attention,
            eta=args.eta,
            folds=args.folds,
            opt_budget=args.budget,
            seed=args.seed,
            regenerate=args.regenerate,
            threads=args.threads or default_threads(),
        )
    except ValidationError as e:
        first = e.errors()[0]
        raise ConfigurationError(first["msg"], field=".".join(str(p) for p in first["loc"])) from e
    SwarmMarkerPipeline(out, config).run()
    return EXIT_OK


def cmd_export_scenarios(args: argparse.Namespace) -> int:
    for spec in canonical_scenarios():
        save_scenario(spec, args.out / f"{spec.id.value}.json")
    logger.info(f"wrote {len(ScenarioId)} scenario files to {args.out}")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "markers": cmd_markers,
    "pipeline": cmd_pipeline,
    "export-scenarios": cmd_export_scenarios,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Parse argv, run the command and map failures to exit codes.

    Returns:
        0 success, 2 configuration or usage, 3 data/window, 4 missing artifact, 1 internal
    """
    load_dotenv()
    logging.basicConfig(
        level=os.getenv("SWARM_MARKERS_LOG_LEVEL", "INFO").upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_USAGE

    try:
        return COMMANDS[args.command](args)
    except SwarmMarkersError as e:
        logger.error(str(e))
        return e.exit_code
    except Exception as e:
        logger.error(f"internal error: {e}", exc_info=True)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
