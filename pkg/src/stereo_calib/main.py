#!/usr/bin/env python3
"""
Stereo spatiotemporal calibrator
Command-line entry point: simulate, calibrate and evaluate
"""

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

from .config import Configuration
from .errors import (
    CalibrationError,
    ConfigurationError,
    FormatError,
    InvalidArgumentError,
    ScenarioError,
    StageError,
)
from .formats import (
    read_detections,
    read_report,
    read_scenario,
    read_sidecar,
    write_detections,
    write_histogram_csv,
    write_report,
    write_sidecar,
)
from .logging import logger
from .models import CalibrationInput
from .pipeline import run_calibration
from .simulator import ErrorMetrics, ScenarioSpec, aggregate, evaluate, generate, metric_rows

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_PIPELINE = 3

INPUT_ERRORS = (FormatError, ConfigurationError, ScenarioError, InvalidArgumentError)

SIDECAR_NAME = "ground_truth.json"


def cmd_simulate(args: argparse.Namespace) -> int:
    """Write one detection file per camera plus the ground-truth sidecar"""
    spec = read_scenario(args.scenario) if args.scenario else ScenarioSpec()
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    bundle = generate(spec)
    out = Path(args.out)
    for camera in bundle.cameras:
        path = out / f"{camera.camera_id}.ndjson"
        write_detections(path, camera, spec.board, bundle.scenario_id)
        logger.log_debug(f"Wrote {path}")
    write_sidecar(out / SIDECAR_NAME, bundle)
    logger.log_metrics(
        [
            {
                "Camera": camera.camera_id,
                "Frames": str(len(camera.ellipse_frames)),
                "Complete patterns": str(len(camera.complete_track)),
            }
            for camera in bundle.cameras
        ],
        f"Simulated scenario {bundle.scenario_id}",
    )
    return EXIT_OK


def cmd_calibrate(args: argparse.Namespace, config: Configuration) -> int:
    """Calibrate a detection file pair and write the report and histogram CSV.

    Returns EXIT_PIPELINE after writing both when bundle adjustment did not converge.
    """
    first, second = read_detections(args.detections[0]), read_detections(args.detections[1])
    if first.board != second.board:
        raise FormatError(
            str(args.detections[1]),
            f"board {second.board.to_dict()} differs from {first.board.to_dict()}",
        )
    scenario_id = first.scenario_id if first.scenario_id == second.scenario_id else None
    inp = CalibrationInput([first.camera, second.camera], first.board, config, scenario_id)
    result = run_calibration(inp)

    report_path = Path(args.out)
    write_report(report_path, result, config)
    write_histogram_csv(report_path.with_suffix(".histogram.csv"), result.residual_stats)
    logger.log_metrics(
        [
            {
                "Camera": cid,
                "Residuals": str(stats.count),
                "Excluded": str(stats.excluded),
                "Mean (px)": f"{stats.mean[0]:+.4f} {stats.mean[1]:+.4f}",
                "Sigma (px)": f"{stats.sigma[0]:.4f} {stats.sigma[1]:.4f}",
            }
            for cid, stats in result.residual_stats.items()
        ],
        "Reprojection Residuals",
    )
    ba_report = result.solver_reports["bundle_adjustment"]
    if not ba_report.converged:
        logger.log_error(
            f"bundle adjustment stopped with '{ba_report.termination}'; "
            f"unconverged report written to {report_path}",
            "Pipeline",
        )
        return EXIT_PIPELINE
    return EXIT_OK


def _report_paths(target: Path) -> List[Path]:
    if target.is_dir():
        paths = sorted(p for p in target.glob("*.json") if p.name != SIDECAR_NAME)
        if not paths:
            raise FormatError(str(target), "directory holds no report files")
        return paths
    return [target]


def cmd_evaluate(args: argparse.Namespace) -> int:
    """Compare one report, or a directory of reports, against the ground truth"""
    truth = read_sidecar(args.sidecar)
    metrics: List[ErrorMetrics] = [
        evaluate(read_report(path), truth) for path in _report_paths(Path(args.report))
    ]
    summary = aggregate(metrics)
    logger.log_metrics(metric_rows(summary), f"Calibration Error ({len(metrics)} run(s))")
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        content = {
            "scenario_id": truth.scenario_id,
            "runs": [m.to_dict() for m in metrics],
            "summary": {key: list(value) for key, value in summary.items()},
        }
        out.write_text(json.dumps(content, indent=2) + "\n", encoding="utf-8")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="JSON configuration file")
    parser = argparse.ArgumentParser(
        prog="stereo-calib", description="Stereo camera spatiotemporal calibration"
    )
    commands = parser.add_subparsers(dest="command", required=True)

    simulate = commands.add_parser(
        "simulate", parents=[common], help="generate a synthetic stereo recording"
    )
    simulate.add_argument(
        "scenario", nargs="?", type=Path, help="scenario JSON (defaults if omitted)"
    )
    simulate.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    simulate.add_argument("--out", type=Path, default=Path("simulation"), help="output directory")

    calibrate = commands.add_parser(
        "calibrate",
        parents=[common],
        help="calibrate a pair of detection files",
        description="Calibrate a pair of detection files. When bundle adjustment stops without "
        "converging, the report and histogram are still written and the exit code is 3.",
    )
    calibrate.add_argument("detections", nargs=2, type=Path, help="two detection files")
    calibrate.add_argument("--out", type=Path, default=Path("report.json"), help="report path")

    evaluate_cmd = commands.add_parser(
        "evaluate", parents=[common], help="compare reports with the ground truth"
    )
    evaluate_cmd.add_argument("report", type=Path, help="report file or directory of reports")
    evaluate_cmd.add_argument("sidecar", type=Path, help="ground-truth sidecar")
    evaluate_cmd.add_argument("--out", type=Path, default=None, help="metrics JSON path")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point"""
    args = build_parser().parse_args(argv)
    logger.log_startup(args.command)
    try:
        config = Configuration.from_file(args.config)
        if args.command == "simulate":
            return cmd_simulate(args)
        if args.command == "calibrate":
            return cmd_calibrate(args, config)
        return cmd_evaluate(args)
    except StageError as exc:
        logger.log_error(str(exc.cause), f"Pipeline stage '{exc.stage}'")
        return EXIT_PIPELINE
    except INPUT_ERRORS as exc:
        logger.log_error(str(exc), "Input")
        return EXIT_INPUT
    except CalibrationError as exc:
        logger.log_error(str(exc), "Pipeline")
        return EXIT_PIPELINE


if __name__ == "__main__":
    sys.exit(main())
