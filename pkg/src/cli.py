"""Command line surface.

Subcommands:
    run      stream window predictions into a global map and write the artifacts
    gen      write a synthetic scene as window containers plus ground truth
    eval     compare run artifacts with ground truth and write a metrics report
    inspect  validate container files and print their headers
    sweep    re-run the synthetic pipeline for several values of one key

Exit codes: 0 success, 1 usage/configuration, 2 data error, 3 numerical failure.
"""

import argparse
import logging
import os
import sys
from typing import Dict, List, Optional, Sequence

import numpy as np

from src.config import ConfigFileLoader, ConfigurationError, PipelineConfig, RuntimeConfig
from src.container import ContainerError, inspect_container, write_window_predictions
from src.export import (
    ExportError,
    read_depths,
    read_ply,
    read_tum,
    write_depths,
    write_ply,
    write_tum,
)
from src.geometry import NumericalError
from src.metrics import SequenceMetrics, evaluate_sequence
from src.models import ExitCode, InputMode
from src.pipeline import (
    InputError,
    SyntheticSource,
    evaluate_against_scene,
    run_stream,
    window_filename,
    write_outputs,
)
from src.report import MetricsReportBuilder, format_record, record_header
from src.synthetic import emit_window, generate_scene, ground_truth_arrays
from src.windowing import schedule_windows

logger = logging.getLogger(__name__)

GT_TRAJECTORY = "gt_trajectory.txt"
GT_DEPTHS = "gt_depths.npz"
GT_POINTS = "gt_points.ply"
RUN_SUMMARY = "run_summary.txt"


class UsageError(Exception):
    """Raised for malformed command lines."""

    def __init__(self, message: str, usage: str):
        self.usage = usage
        super().__init__(message)


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message, self.format_usage())


def build_parser() -> argparse.ArgumentParser:
    """Argument parser with one subparser per command."""
    common = _ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="Flat key = value config file.")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Override one config key (repeatable).",
    )
    common.add_argument("--input-dir", default=None, help="Window container directory.")
    common.add_argument("--output-dir", default=None, help="Artifact directory.")

    parser = _ArgumentParser(prog="submap-align", description="Streaming submap alignment.")
    commands = parser.add_subparsers(dest="command", metavar="COMMAND")
    commands.required = True

    commands.add_parser("run", parents=[common], help="Run the streaming pipeline.")
    commands.add_parser("gen", parents=[common], help="Write a synthetic scene.")

    evaluate = commands.add_parser("eval", parents=[common], help="Evaluate run outputs.")
    evaluate.add_argument("--gt-dir", default=None, help="Ground truth directory.")
    evaluate.add_argument("--sequence", default=None, help="Sequence name in the report.")

    inspect = commands.add_parser("inspect", parents=[common], help="Dump container headers.")
    inspect.add_argument("paths", nargs="+", help="Container files.")

    sweep = commands.add_parser("sweep", parents=[common], help="Sweep one config key.")
    sweep.add_argument("--key", required=True, help="Config key to vary.")
    sweep.add_argument("--values", required=True, help="Comma-separated values.")
    return parser


def configure_logging():
    """Set the root logging level from LASER_LOG_LEVEL."""
    name = RuntimeConfig().log_level
    level = logging.getLevelName(name)
    if not isinstance(level, int):
        raise ConfigurationError(f"LASER_LOG_LEVEL must be a logging level name, got {name!r}")
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def load_config(args: argparse.Namespace) -> PipelineConfig:
    """Config file, then ``--set`` pairs, then the directory flags."""
    overrides: Dict[str, str] = ConfigFileLoader.parse_overrides(args.overrides)
    if args.input_dir is not None:
        overrides["input_dir"] = args.input_dir
    if args.output_dir is not None:
        overrides["output_dir"] = args.output_dir
    return PipelineConfig.load(args.config, overrides)


def cmd_run(config: PipelineConfig, _args) -> int:
    """Stream predictions and write the run artifacts."""
    print(f"🚀 Running pipeline (input: {config.output.input_mode.value})")
    result = run_stream(config)
    written = write_outputs(result, config)
    summary = result.summary
    sequence = os.path.basename(os.path.normpath(config.output.output_dir))
    summary_path = os.path.join(config.output.output_dir, RUN_SUMMARY)
    with open(summary_path, "w", encoding="utf-8") as handle:
        handle.write(MetricsReportBuilder().add_header(sequence).add_summary(summary).build())
    written.append(summary_path)
    print(
        f"✅ Processed {summary.windows} windows, {summary.frames} frames, "
        f"{summary.points} points ({summary.fallbacks} fallbacks)"
    )
    print(
        f"📋 Peak retained: {summary.peak_retained_windows} windows "
        f"({summary.peak_retained_bytes} bytes); per-window time slope "
        f"{summary.window_ms_slope:.4g} ms/window (p={summary.window_ms_p_value:.3g})"
    )
    print(f"📋 Outputs: {len(written)}")
    for idx, path in enumerate(written, 1):
        print(f"   {idx}. {path}")
    return ExitCode.SUCCESS.value


def cmd_gen(config: PipelineConfig, _args) -> int:
    """Write a synthetic scene as window containers and ground-truth files."""
    target = config.output.input_dir
    os.makedirs(target, exist_ok=True)
    scene = generate_scene(config.scene)
    specs = schedule_windows(scene.frame_count, config.window.window_len, config.window.overlap)
    print(f"🚀 Generating {len(specs)} windows over {scene.frame_count} frames into {target}")
    for spec in specs:
        path = os.path.join(target, window_filename(spec.index))
        write_window_predictions(emit_window(scene, spec), path)
    timestamps, depths, points = ground_truth_arrays(scene)
    write_tum(scene.trajectory, os.path.join(target, GT_TRAJECTORY))
    write_depths(os.path.join(target, GT_DEPTHS), timestamps, depths)
    write_ply(points, os.path.join(target, GT_POINTS), config.output.ply_format)
    print(f"✅ Scene diameter {scene.diameter:.6g}, {points.shape[0]} ground-truth points")
    return ExitCode.SUCCESS.value


def _matched_depths(est_path: str, gt_path: str):
    est_ts, est = read_depths(est_path)
    gt_ts, gt = read_depths(gt_path)
    common, est_idx, gt_idx = np.intersect1d(est_ts, gt_ts, return_indices=True)
    if common.size == 0:
        raise InputError(0, "no common timestamps between estimated and ground-truth depths")
    return est[est_idx], gt[gt_idx]


def evaluate_directory(config: PipelineConfig, output_dir: str, gt_dir: str) -> SequenceMetrics:
    """Evaluate the artifacts of ``output_dir`` against the ground truth in ``gt_dir``."""
    est_traj = read_tum(os.path.join(output_dir, "trajectory.txt"))
    gt_traj = read_tum(os.path.join(gt_dir, GT_TRAJECTORY))
    est_depths = gt_depths = est_points = gt_points = None
    est_depth_path = os.path.join(output_dir, "depths.npz")
    gt_depth_path = os.path.join(gt_dir, GT_DEPTHS)
    if os.path.exists(est_depth_path) and os.path.exists(gt_depth_path):
        est_depths, gt_depths = _matched_depths(est_depth_path, gt_depth_path)
    est_points_path = os.path.join(output_dir, "points.ply")
    gt_points_path = os.path.join(gt_dir, GT_POINTS)
    if os.path.exists(est_points_path) and os.path.exists(gt_points_path):
        est_points, gt_points = read_ply(est_points_path), read_ply(gt_points_path)
    return evaluate_sequence(
        est_traj,
        gt_traj,
        est_depths,
        gt_depths,
        est_points,
        gt_points,
        config.metrics,
        RuntimeConfig().threads,
    )


def cmd_eval(config: PipelineConfig, args) -> int:
    """Print and write the metrics report of a finished run."""
    output_dir = config.output.output_dir
    gt_dir = args.gt_dir or config.output.input_dir
    sequence = args.sequence or os.path.basename(os.path.normpath(output_dir))
    print(f"🚀 Evaluating {output_dir} against {gt_dir}")
    metrics = evaluate_directory(config, output_dir, gt_dir)
    report = MetricsReportBuilder().add_header(sequence).add_metrics(metrics).build()
    with open(os.path.join(output_dir, "metrics.txt"), "w", encoding="utf-8") as handle:
        handle.write(report)
    with open(os.path.join(output_dir, "metrics.record"), "w", encoding="utf-8") as handle:
        handle.write(record_header() + "\n" + format_record(sequence, metrics) + "\n")
    print("📋 Metrics:")
    print(report, end="")
    return ExitCode.SUCCESS.value


def cmd_inspect(_config: PipelineConfig, args) -> int:
    """Validate containers and print their headers."""
    for path in args.paths:
        header = inspect_container(path)
        fields = " ".join(f"{k}={v}" for k, v in header.to_dict().items())
        print(f"📋 {path}: {fields}")
    return ExitCode.SUCCESS.value


def cmd_sweep(config: PipelineConfig, args) -> int:
    """Run the synthetic pipeline once per value of one key."""
    if args.key not in PipelineConfig.known_keys():
        raise ConfigurationError(f"Unknown configuration key: {args.key}")
    # tuple-valued keys are swept with ";" between values
    separator = ";" if ";" in args.values else ","
    values = [v.strip() for v in args.values.split(separator) if v.strip()]
    if not values:
        raise ConfigurationError("--values needs at least one value")
    print(f"🚀 Sweeping {args.key} over {len(values)} values")
    print(record_header())
    for value in values:
        overrides = {args.key: value, "input_mode": InputMode.SYNTHETIC.value}
        run_config = config.with_values(**overrides)
        scene = generate_scene(run_config.scene)
        source = SyntheticSource(scene, run_config.window.window_len, run_config.window.overlap)
        result = run_stream(run_config, source)
        metrics = evaluate_against_scene(result, scene, run_config)
        print(format_record(f"{args.key}={value}", metrics))
    return ExitCode.SUCCESS.value


COMMANDS = {
    "run": cmd_run,
    "gen": cmd_gen,
    "eval": cmd_eval,
    "inspect": cmd_inspect,
    "sweep": cmd_sweep,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Parse arguments, dispatch a subcommand and map failures to exit codes.

    Returns:
        Process exit code
    """
    argv: List[str] = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(exc.usage)
        sys.stderr.write(f"{parser.prog}: error: {exc}\n")
        return ExitCode.USAGE.value
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        configure_logging()
        config = load_config(args)
        return COMMANDS[args.command](config, args)
    except ConfigurationError as exc:
        print(f"❌ Configuration error: {exc}", file=sys.stderr)
        return ExitCode.USAGE.value
    except (ContainerError, InputError, ExportError, OSError) as exc:
        print(f"❌ Data error: {exc}", file=sys.stderr)
        return ExitCode.DATA_ERROR.value
    except NumericalError as exc:
        print(f"❌ Numerical failure: {exc}", file=sys.stderr)
        return ExitCode.NUMERICAL_ERROR.value


# Backwards compatibility - expose main under the name used by the module entry point
cli_main = main
