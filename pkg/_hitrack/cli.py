"""Command-line entry point.

Subcommands::

    hitrack run   (--seq <dir> | --scenario <name> [--seed N]) --out <dir>
                  [--config <file>] [--<key> <value> ...]
    hitrack bench (--seq <root> | --scenario <name> ... [--seed N]) --out <dir>
                  [--protocol otb|vot|both] [...]
    hitrack synth --scenario <name> --out <dir> [--seed N]
    hitrack eval  --traj <file> --seq <dir> --out <dir>

Exit status is 0 on success, 1 on bad input and 2 on internal errors.
Diagnostics go to stderr; results go to files under ``--out``.
"""

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path
from statistics import mean
from typing import NoReturn

from _hitrack.bench import (
    PRECISION_THRESHOLDS,
    SUCCESS_THRESHOLDS,
    TRUTH_FILE,
    MetricReport,
    Sequence,
    aggregate,
    load_sequence,
    otb_metrics,
    read_trajectory,
    vot_evaluate,
    write_sequence,
    write_trajectory,
)
from _hitrack.config import ConfigMap, TrackerConfig
from _hitrack.errors import (
    BoundaryError,
    ConfigError,
    HitrackError,
    IngestionError,
    InputError,
    ScenarioError,
    SequenceError,
)
from _hitrack.features import ExternalSource, FeatureSource
from _hitrack.synth import SCENARIO_NAMES, scenario_preset, synth_sequence
from _hitrack.tracker import Tracker, run_sequence

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_INPUT, EXIT_INTERNAL = 0, 1, 2
INPUT_ERRORS = (
    InputError,
    SequenceError,
    ConfigError,
    IngestionError,
    ScenarioError,
    BoundaryError,
    FileNotFoundError,
)
TRAJECTORY_FILE = "trajectory.txt"
METRICS_FILE = "metrics.json"
PRECISION_FILE = "precision.csv"
SUCCESS_FILE = "success.csv"


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _add_tracker_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--config", type=Path, help="key = value config file")
    parser.add_argument(
        "--features",
        default="handcrafted",
        help="'handcrafted' or 'external:<dir>' with one .mhft file per frame",
    )
    parser.add_argument(
        "--no-motion", action="store_true", help="disable the motion model"
    )
    parser.add_argument("--workers", type=int, default=1, help="worker threads")
    overrides = parser.add_argument_group("configuration overrides")
    for f in fields(TrackerConfig):
        overrides.add_argument(
            f"--{f.name}", dest=f"cfg_{f.name}", metavar="VALUE", default=None
        )


def build_parser() -> argparse.ArgumentParser:
    """The argument parser of every subcommand."""
    parser = _Parser(prog="hitrack", description="multi-branch correlation tracker")
    parser.add_argument(
        "--log-level",
        default="WARNING",
        choices=("DEBUG", "INFO", "WARNING", "ERROR"),
        type=str.upper,
    )
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="track one sequence")
    source = run.add_mutually_exclusive_group(required=True)
    source.add_argument("--seq", type=Path, help="sequence directory")
    source.add_argument(
        "--scenario", choices=SCENARIO_NAMES, help="track a synthetic preset"
    )
    run.add_argument("--seed", type=int, default=0, help="seed of --scenario")
    run.add_argument("--out", type=Path, required=True, help="output directory")
    _add_tracker_flags(run)

    bench = commands.add_parser("bench", help="evaluate a directory of sequences")
    source = bench.add_mutually_exclusive_group(required=True)
    source.add_argument("--seq", type=Path, help="dataset root")
    source.add_argument(
        "--scenario",
        choices=SCENARIO_NAMES,
        nargs="+",
        help="evaluate synthetic presets",
    )
    bench.add_argument("--seed", type=int, default=0, help="seed of --scenario")
    bench.add_argument("--out", type=Path, required=True, help="output directory")
    bench.add_argument("--protocol", choices=("otb", "vot", "both"), default="otb")
    _add_tracker_flags(bench)

    synth = commands.add_parser("synth", help="generate a synthetic sequence")
    synth.add_argument("--scenario", choices=SCENARIO_NAMES, required=True)
    synth.add_argument("--out", type=Path, required=True, help="sequence directory")
    synth.add_argument("--seed", type=int, default=0)

    evaluate = commands.add_parser("eval", help="score a saved trajectory")
    evaluate.add_argument("--traj", type=Path, required=True, help="trajectory file")
    evaluate.add_argument("--seq", type=Path, required=True, help="sequence directory")
    evaluate.add_argument("--out", type=Path, required=True, help="output directory")
    return parser


def tracker_config(args: argparse.Namespace) -> TrackerConfig:
    """Defaults, then the ``--config`` file, then per-key flags.

    Raises:
        ConfigError: On an unknown or invalid value.
    """
    values = ConfigMap.load(args.config) if args.config else ConfigMap.new()
    for f in fields(TrackerConfig):
        flag = getattr(args, f"cfg_{f.name}")
        if flag is not None:
            values = values.put(f.name, flag)
    if args.no_motion:
        values = values.put("use_motion", False)
    return TrackerConfig.from_map(values)


def feature_source(spec: str, config: TrackerConfig) -> FeatureSource | None:
    """Parses ``--features``; None selects the hand-crafted source.

    Raises:
        InputError: On an unknown feature kind.
    """
    kind, _, location = spec.partition(":")
    match kind:
        case "handcrafted" if not location:
            return None
        case "external" if location:
            return ExternalSource(Path(location), config.layer_specs)
        case _:
            raise InputError(
                f"--features must be handcrafted or external:<dir>, not {spec!r}"
            )


def _write_curves(report: MetricReport, out: Path):
    for name, column, thresholds, values in (
        (PRECISION_FILE, "precision", PRECISION_THRESHOLDS, report.precision),
        (SUCCESS_FILE, "success", SUCCESS_THRESHOLDS, report.success),
    ):
        with open(out / name, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(["threshold", column])
            writer.writerows(
                (f"{t:g}", f"{v:.6f}") for t, v in zip(thresholds, values)
            )


def _write_metrics(document: dict, out: Path):
    with open(out / METRICS_FILE, "w", encoding="utf-8") as handle:
        json.dump(document, handle, indent=2)
        handle.write("\n")


def _synthetic(name: str, seed: int) -> Sequence:
    return synth_sequence(scenario_preset(name, seed))


def _sequences(args: argparse.Namespace) -> list[Sequence]:
    if args.scenario is not None:
        names = dict.fromkeys(args.scenario)
        return [_synthetic(name, args.seed) for name in names]
    roots = sorted(p for p in args.seq.iterdir() if (p / TRUTH_FILE).is_file())
    if not roots:
        raise InputError(f"no sequences under {args.seq}")
    return [load_sequence(root) for root in roots]


def _run(args: argparse.Namespace) -> int:
    config = tracker_config(args)
    source = feature_source(args.features, config)
    if args.scenario is not None:
        sequence = _synthetic(args.scenario, args.seed)
    else:
        sequence = load_sequence(args.seq)
    logger.info("tracking %s (%d frames)", sequence.name, len(sequence))
    trajectory = run_sequence(
        sequence.iter_frames(), sequence.box(0), config, source, args.workers
    )
    args.out.mkdir(parents=True, exist_ok=True)
    write_trajectory(args.out / TRAJECTORY_FILE, trajectory)
    report = otb_metrics(
        trajectory, sequence.truth, sequence.name, sequence.attributes
    )
    _write_metrics(report.to_dict(), args.out)
    _write_curves(report, args.out)
    logger.info(
        "%s: AUC %.3f, precision@20 %.3f",
        sequence.name,
        report.auc,
        report.precision_at_20,
    )
    return EXIT_OK


def _bench(args: argparse.Namespace) -> int:
    config = tracker_config(args)
    source = feature_source(args.features, config)
    sequences = _sequences(args)
    args.out.mkdir(parents=True, exist_ok=True)
    reports, entries = [], []
    for sequence in sequences:
        logger.info("evaluating %s (%d frames)", sequence.name, len(sequence))
        entry: dict = {"name": sequence.name}
        if args.protocol in ("otb", "both"):
            trajectory = run_sequence(
                sequence.iter_frames(), sequence.box(0), config, source, args.workers
            )
            write_trajectory(args.out / f"{sequence.name}.txt", trajectory)
            report = otb_metrics(
                trajectory, sequence.truth, sequence.name, sequence.attributes
            )
            reports.append(report)
            entry["otb"] = report.to_dict()
        if args.protocol in ("vot", "both"):
            vot = vot_evaluate(lambda: Tracker(config, source, args.workers), sequence)
            entry["vot"] = asdict(vot)
        entries.append(entry)
    document: dict = {"protocol": args.protocol, "sequences": entries}
    if reports:
        overall = aggregate(reports)
        document["otb"] = overall.to_dict()
        _write_curves(overall, args.out)
    if args.protocol in ("vot", "both"):
        document["vot"] = {
            "accuracy": mean(e["vot"]["accuracy"] for e in entries),
            "robustness": sum(e["vot"]["robustness"] for e in entries),
        }
    _write_metrics(document, args.out)
    return EXIT_OK


def _synth(args: argparse.Namespace) -> int:
    sequence = synth_sequence(scenario_preset(args.scenario, args.seed))
    write_sequence(sequence, args.out)
    logger.info("wrote %s (%d frames) to %s", sequence.name, len(sequence), args.out)
    return EXIT_OK


def _eval(args: argparse.Namespace) -> int:
    sequence = load_sequence(args.seq)
    report = otb_metrics(
        read_trajectory(args.traj), sequence.truth, sequence.name, sequence.attributes
    )
    args.out.mkdir(parents=True, exist_ok=True)
    _write_metrics(report.to_dict(), args.out)
    _write_curves(report, args.out)
    return EXIT_OK


def cli_main(argv: list[str]) -> int:
    """Runs one subcommand and returns the process exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_INPUT
    logging.basicConfig(
        level=args.log_level,
        stream=sys.stderr,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    command = {"run": _run, "bench": _bench, "synth": _synth, "eval": _eval}
    try:
        return command[args.command](args)
    except INPUT_ERRORS as e:
        print(f"hitrack: error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except HitrackError as e:
        logger.error("%s failed: %s", args.command, e)
        return EXIT_INTERNAL
    except Exception:
        logger.exception("%s failed", args.command)
        return EXIT_INTERNAL


def main() -> NoReturn:
    """Console script entry point."""
    sys.exit(cli_main(sys.argv[1:]))


__all__ = [
    "build_parser",
    "tracker_config",
    "feature_source",
    "cli_main",
    "main",
]
