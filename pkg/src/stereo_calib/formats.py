"""
File formats: newline-delimited JSON detection streams, the calibration report, the residual
histogram CSV and the ground-truth sidecar written by the simulator.

Floats are written with Python's shortest round-trip representation in both the JSON and the CSV
files. It parses to the same double as 17 significant digits, so every value reads back exactly.
"""

import csv
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

from .config import Configuration
from .errors import FormatError, InvalidArgumentError, ScenarioError
from .geometry import CameraIntrinsics
from .models import (
    BoardSpec,
    CalibrationResult,
    CameraData,
    EllipseFrame,
    GridPattern,
    PatternTrack,
    ResidualStats,
    SpatiotemporalParams,
)
from .simulator import GroundTruthBundle, ScenarioSpec

FORMAT_VERSION = 1

PathLike = Union[str, Path]


def _dump(record: Dict[str, Any]) -> str:
    return json.dumps(record, allow_nan=False, separators=(",", ":"))


def _float_text(value: float) -> str:
    """Shortest decimal that parses back to the same double; same value as format(x, ".17g")"""
    return repr(float(value))


def _read_json(path: PathLike, what: str) -> Any:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise FormatError(str(path), f"cannot read {what}: {exc.strerror or exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(str(path), f"invalid JSON: {exc.msg}", exc.lineno) from exc


def _write_json(path: PathLike, data: Dict[str, Any]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(data, indent=2, allow_nan=False) + "\n", encoding="utf-8")


def _check_version(path: PathLike, data: Dict[str, Any], line: Optional[int] = None) -> None:
    if "version" not in data:
        raise FormatError(str(path), "missing format version", line)
    if data["version"] != FORMAT_VERSION:
        raise FormatError(str(path), f"unsupported format version {data['version']!r}", line)


# ----------------------------------------------------------------------------------------------
# Detection streams
# ----------------------------------------------------------------------------------------------


@dataclass
class DetectionFile:
    """Parsed detection stream of one camera"""

    camera: CameraData
    board: BoardSpec
    scenario_id: Optional[str] = None


def _records(camera: CameraData) -> Iterator[Tuple[float, int, Dict[str, Any]]]:
    for frame in camera.ellipse_frames:
        record = {"type": "frame", "t": frame.timestamp, "centers": frame.centers.tolist()}
        yield frame.timestamp, 0, record
    for pattern in camera.complete_track:
        points = [
            [int(j), float(x), float(y)]
            for j, (x, y) in zip(pattern.circle_indices, pattern.image_points)
        ]
        yield pattern.timestamp, 1, {"type": "pattern", "t": pattern.timestamp, "points": points}


def write_detections(
    path: PathLike, camera: CameraData, board: BoardSpec, scenario_id: Optional[str] = None
) -> None:
    """Header line followed by frame and pattern records in time order"""
    header = {
        "type": "header",
        "version": FORMAT_VERSION,
        "camera_id": camera.camera_id,
        "intrinsics": camera.intrinsics.to_dict(),
        "board": board.to_dict(),
        "scenario_id": scenario_id,
    }
    records = sorted(_records(camera), key=lambda r: (r[0], r[1]))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(_dump(header) + "\n")
        for _, _, record in records:
            handle.write(_dump(record) + "\n")


def _parse_header(
    path: PathLike, record: Dict[str, Any]
) -> Tuple[str, CameraIntrinsics, BoardSpec]:
    if record.get("type") != "header":
        raise FormatError(str(path), "first record must be the header", 1)
    _check_version(path, record, 1)
    try:
        return (
            str(record["camera_id"]),
            CameraIntrinsics.from_dict(record["intrinsics"]),
            BoardSpec.from_dict(record["board"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(str(path), f"invalid header: {exc}", 1) from exc


def read_detections(path: PathLike) -> DetectionFile:
    """Parse a detection stream; every error names the offending line"""
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise FormatError(str(path), f"cannot read detections: {exc.strerror or exc}") from exc
    parsed: List[Tuple[int, Dict[str, Any]]] = []
    for number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(str(path), f"invalid JSON: {exc.msg}", number) from exc
        if not isinstance(record, dict):
            raise FormatError(str(path), "record must be an object", number)
        parsed.append((number, record))
    if not parsed:
        raise FormatError(str(path), "empty detection file")

    camera_id, intrinsics, board = _parse_header(path, parsed[0][1])
    object_points = board.object_points()
    frames: List[EllipseFrame] = []
    patterns: List[GridPattern] = []
    last_time = -np.inf
    for number, record in parsed[1:]:
        kind = record.get("type")
        try:
            t = float(record["t"])
            if t < last_time:
                raise FormatError(str(path), f"record at t={t} is out of time order", number)
            last_time = t
            if kind == "frame":
                centers = np.array(record["centers"], dtype=float).reshape(-1, 2)
                frames.append(EllipseFrame(t, centers))
            elif kind == "pattern":
                points = np.array(record["points"], dtype=float).reshape(-1, 3)
                patterns.append(
                    GridPattern.from_board(
                        t, points[:, 0].astype(int), points[:, 1:], board, object_points
                    )
                )
            else:
                raise FormatError(str(path), f"unknown record type {kind!r}", number)
        except FormatError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(str(path), f"invalid {kind} record: {exc}", number) from exc

    try:
        track = PatternTrack(camera_id, patterns)
    except InvalidArgumentError as exc:
        raise FormatError(str(path), str(exc)) from exc
    return DetectionFile(
        CameraData(camera_id, intrinsics, track, frames), board, parsed[0][1].get("scenario_id")
    )


# ----------------------------------------------------------------------------------------------
# Calibration report and histogram
# ----------------------------------------------------------------------------------------------


@dataclass
class CalibrationReport:
    """Report read back from disk; enough to evaluate without the detection files"""

    params: SpatiotemporalParams
    reference_camera: str
    target_camera: str
    scenario_id: Optional[str] = None
    data: Dict[str, Any] = field(default_factory=dict)


def report_dict(
    result: CalibrationResult, config: Optional[Configuration] = None
) -> Dict[str, Any]:
    return {
        "version": FORMAT_VERSION,
        "scenario_id": result.scenario_id,
        "reference_camera": result.reference_camera,
        "target_camera": result.target_camera,
        "spatiotemporal": result.params.to_dict(),
        "solver": {name: report.to_dict() for name, report in result.solver_reports.items()},
        "tracking": {cid: stats.to_dict() for cid, stats in result.tracking_stats.items()},
        "residuals": {cid: stats.to_dict() for cid, stats in result.residual_stats.items()},
        "segments": [segment.to_dict() for segment in result.segments],
        "hand_eye": result.hand_eye.to_dict() if result.hand_eye else None,
        "pnp_failures": dict(result.pnp_failures),
        "timings_s": dict(result.timings),
        "config": (config or Configuration()).to_dict(),
        "trajectory": result.trajectory.to_dict(),
    }


def write_report(
    path: PathLike, result: CalibrationResult, config: Optional[Configuration] = None
) -> None:
    _write_json(path, report_dict(result, config))


def read_report(path: PathLike) -> CalibrationReport:
    data = _read_json(path, "report")
    if not isinstance(data, dict):
        raise FormatError(str(path), "report must be a JSON object")
    _check_version(path, data)
    try:
        return CalibrationReport(
            SpatiotemporalParams.from_dict(data["spatiotemporal"]),
            str(data["reference_camera"]),
            str(data["target_camera"]),
            data.get("scenario_id"),
            data,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(str(path), f"invalid report: {exc}") from exc


def write_histogram_csv(path: PathLike, stats: Dict[str, ResidualStats]) -> None:
    """One row per 2D bin: camera, x bin center, y bin center, count"""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["camera", "x_center", "y_center", "count"])
        for camera, residual in stats.items():
            centers = residual.bin_centers
            for i, x in enumerate(centers):
                for j, y in enumerate(centers):
                    count = int(residual.histogram[i, j])
                    writer.writerow([camera, _float_text(x), _float_text(y), count])


# ----------------------------------------------------------------------------------------------
# Scenario files and ground-truth sidecar
# ----------------------------------------------------------------------------------------------


@dataclass
class GroundTruthSidecar:
    """Truth written next to simulated detections"""

    params: SpatiotemporalParams
    reference_camera: str
    target_camera: str
    scenario_id: Optional[str]
    scenario: Dict[str, Any] = field(default_factory=dict)


def _key_line(text: str, message: str) -> Optional[int]:
    """Line of the first JSON key the message names, spelled with underscores or spaces"""
    for number, line in enumerate(text.splitlines(), start=1):
        for key in re.findall(r'"(\w+)"\s*:', line):
            if key in message or key.replace("_", " ") in message:
                return number
    return None


def read_scenario(path: PathLike) -> ScenarioSpec:
    """Scenario JSON; missing keys take the simulator defaults"""
    data = _read_json(path, "scenario")
    if not isinstance(data, dict):
        raise FormatError(str(path), "scenario must be a JSON object")
    try:
        return ScenarioSpec.from_dict(data)
    except (ScenarioError, InvalidArgumentError) as exc:
        line = _key_line(Path(path).read_text(encoding="utf-8"), str(exc))
        raise FormatError(str(path), str(exc), line) from exc


def write_sidecar(path: PathLike, bundle: GroundTruthBundle) -> None:
    _write_json(
        path,
        {
            "version": FORMAT_VERSION,
            "scenario_id": bundle.scenario_id,
            "reference_camera": bundle.reference_camera,
            "target_camera": bundle.target_camera,
            "params": bundle.params.to_dict(),
            "visible_fraction": bundle.visible_fraction,
            "scenario": bundle.spec.to_dict(),
        },
    )


def read_sidecar(path: PathLike) -> GroundTruthSidecar:
    data = _read_json(path, "ground-truth sidecar")
    if not isinstance(data, dict):
        raise FormatError(str(path), "sidecar must be a JSON object")
    _check_version(path, data)
    try:
        return GroundTruthSidecar(
            SpatiotemporalParams.from_dict(data["params"]),
            str(data["reference_camera"]),
            str(data["target_camera"]),
            data.get("scenario_id"),
            data.get("scenario", {}),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(str(path), f"invalid sidecar: {exc}") from exc
