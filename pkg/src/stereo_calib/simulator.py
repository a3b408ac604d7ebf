"""
Ground-truth stereo scenarios: a sum-of-sinusoids camera trajectory (optionally sampled into a
cubic B-spline) looking at a circle grid, projected through both cameras with FOV clipping, an
oblique-view cutoff, Bernoulli dropout, Gaussian pixel noise and a clock shift on the target
camera.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial.transform import Rotation as ScipyRotation

from .config import Configuration
from .errors import CalibrationError, ScenarioError
from .geometry import MIN_DEPTH, CameraIntrinsics, Pose, Rotation, project_points
from .logging import logger
from .models import (
    BoardSpec,
    CalibrationInput,
    CameraData,
    EllipseFrame,
    GridPattern,
    PatternTrack,
    SpatiotemporalParams,
    euler_xyz_degrees,
)
from .pipeline import run_calibration
from .spline import PositionSpline, RotationSpline

REFERENCE_CAMERA = "left"
TARGET_CAMERA = "right"
MIN_VISIBLE_FRACTION = 0.6

Vector3 = Tuple[float, float, float]


def default_intrinsics() -> CameraIntrinsics:
    """346 x 260 event sensor with a 300 px focal length"""
    return CameraIntrinsics(fx=300.0, fy=300.0, cx=173.0, cy=130.0, width=346, height=260)


@dataclass(frozen=True)
class TrajectoryRecipe:
    """Reference camera motion: sinusoidal position around a standoff, looking at the board.

    Orientation is the look-at rotation followed by a sinusoidal wobble in the camera frame.
    With ``spline_knot_spacing`` set, the motion is the cumulative cubic B-spline whose control
    poses sample that recipe on the grid of multiples of the spacing, so a calibrator with the
    same spacing and a knot on that grid represents it exactly.
    """

    standoff: float = 0.6  # m, along -z of the board
    position_amplitude: Vector3 = (0.10, 0.08, 0.05)  # m
    position_frequency: Vector3 = (0.31, 0.43, 0.27)  # Hz
    position_phase: Vector3 = (0.0, 1.1, 2.3)  # rad
    rotation_amplitude_deg: Vector3 = (3.0, 3.0, 15.0)
    rotation_frequency: Vector3 = (0.37, 0.29, 0.41)  # Hz
    rotation_phase: Vector3 = (0.5, 1.7, 2.9)  # rad
    spline_knot_spacing: Optional[float] = None  # s

    @staticmethod
    def _sinusoid(
        tau: np.ndarray, amplitude: Vector3, frequency: Vector3, phase: Vector3
    ) -> np.ndarray:
        tau = np.atleast_1d(np.asarray(tau, dtype=float))[:, None]
        return np.asarray(amplitude) * np.sin(
            2.0 * np.pi * np.asarray(frequency) * tau + np.asarray(phase)
        )

    def poses(self, tau: np.ndarray, focus: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Camera-to-world rotations (N, 3, 3) and positions (N, 3)"""
        tau = np.atleast_1d(np.asarray(tau, dtype=float))
        if self.spline_knot_spacing is None:
            return self._recipe_poses(tau, focus)
        dt = self.spline_knot_spacing
        first = int(np.floor(tau.min() / dt)) - 2
        last = int(np.floor(tau.max() / dt)) + 3
        knots = np.arange(first, last + 1) * dt
        rotations, positions = self._recipe_poses(knots, focus)
        quats = ScipyRotation.from_matrix(rotations).as_quat()[:, [3, 0, 1, 2]]
        rotation_spline = RotationSpline(knots[0], dt, quats)
        position_spline = PositionSpline(knots[0], dt, positions)
        return rotation_spline.evaluate(tau), position_spline.evaluate(tau)

    def _recipe_poses(self, tau: np.ndarray, focus: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        offsets = self._sinusoid(
            tau, self.position_amplitude, self.position_frequency, self.position_phase
        )
        positions = focus + np.array([0.0, 0.0, -self.standoff]) + offsets
        forward = focus - positions
        forward /= np.linalg.norm(forward, axis=1, keepdims=True)
        right = np.cross(np.array([0.0, 1.0, 0.0]), forward)
        right /= np.linalg.norm(right, axis=1, keepdims=True)
        down = np.cross(forward, right)
        look_at = np.stack([right, down, forward], axis=-1)
        wobble = np.deg2rad(
            self._sinusoid(
                tau, self.rotation_amplitude_deg, self.rotation_frequency, self.rotation_phase
            )
        )
        rotations = look_at @ ScipyRotation.from_rotvec(wobble).as_matrix()
        return rotations, positions

    def to_dict(self) -> Dict[str, Any]:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrajectoryRecipe":
        _reject_unknown(cls, data, "trajectory")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()})


def _reject_unknown(cls: type, data: Dict[str, Any], what: str) -> None:
    if not isinstance(data, dict):
        raise ScenarioError(f"{what} must be an object")
    unknown = sorted(set(data) - {f.name for f in fields(cls)})
    if unknown:
        raise ScenarioError(f"unknown {what} keys {unknown}")


@dataclass(frozen=True)
class ScenarioSpec:
    """Everything needed to reproduce one synthetic stereo recording"""

    board: BoardSpec = field(default_factory=lambda: BoardSpec.preset("3x7"))
    intrinsics: Dict[str, CameraIntrinsics] = field(
        default_factory=lambda: {
            REFERENCE_CAMERA: default_intrinsics(),
            TARGET_CAMERA: default_intrinsics(),
        }
    )
    rotation_deg: Vector3 = (0.5, -0.3, 0.2)  # target w.r.t. reference, intrinsic XYZ
    translation: Vector3 = (0.12, 0.0, 0.0)  # m
    time_shift: float = 0.01  # s, subtracted from target timestamps
    trajectory: TrajectoryRecipe = field(default_factory=TrajectoryRecipe)
    duration: float = 30.0  # s
    frame_rate: float = 100.0  # Hz
    noise_sigma: float = 0.1  # px
    dropout_rate: float = 0.0
    oblique_cutoff_deg: float = 65.0
    seed: int = 0

    def validate(self) -> "ScenarioSpec":
        if not self.duration > 0:
            raise ScenarioError(f"duration must be positive, got {self.duration}")
        if not self.frame_rate > 0:
            raise ScenarioError(f"frame rate must be positive, got {self.frame_rate}")
        if not self.noise_sigma >= 0:
            raise ScenarioError(f"noise sigma must be nonnegative, got {self.noise_sigma}")
        if not 0.0 <= self.dropout_rate <= 1.0:
            raise ScenarioError(f"dropout rate must lie in [0, 1], got {self.dropout_rate}")
        if not 0.0 < self.oblique_cutoff_deg <= 90.0:
            raise ScenarioError(
                f"oblique cutoff must lie in (0, 90], got {self.oblique_cutoff_deg}"
            )
        spacing = self.trajectory.spline_knot_spacing
        if spacing is not None and not spacing > 0:
            raise ScenarioError(f"spline knot spacing must be positive, got {spacing}")
        if set(self.intrinsics) != {REFERENCE_CAMERA, TARGET_CAMERA}:
            raise ScenarioError(
                f"intrinsics needed for cameras '{REFERENCE_CAMERA}' and '{TARGET_CAMERA}'"
            )
        return self

    @property
    def params(self) -> SpatiotemporalParams:
        """True target-w.r.t.-reference parameters; the offset equals the injected shift"""
        x, y, z, w = ScipyRotation.from_euler("XYZ", self.rotation_deg, degrees=True).as_quat()
        rotation = Rotation(np.array([w, x, y, z]))
        return SpatiotemporalParams(rotation, self.translation, self.time_shift)

    @property
    def scenario_id(self) -> str:
        """Hash of everything but the seed"""
        content = self.to_dict()
        content.pop("seed")
        digest = hashlib.sha256(json.dumps(content, sort_keys=True).encode("utf-8"))
        return digest.hexdigest()[:16]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "board": self.board.to_dict(),
            "intrinsics": {cid: intr.to_dict() for cid, intr in sorted(self.intrinsics.items())},
            "rotation_deg": list(self.rotation_deg),
            "translation": list(self.translation),
            "time_shift": self.time_shift,
            "trajectory": self.trajectory.to_dict(),
            "duration": self.duration,
            "frame_rate": self.frame_rate,
            "noise_sigma": self.noise_sigma,
            "dropout_rate": self.dropout_rate,
            "oblique_cutoff_deg": self.oblique_cutoff_deg,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ScenarioSpec":
        """Scenario from a partial mapping; missing keys take the defaults"""
        _reject_unknown(cls, data, "scenario")
        kwargs: Dict[str, Any] = dict(data)
        try:
            if "board" in kwargs:
                board = kwargs["board"]
                kwargs["board"] = (
                    BoardSpec.preset(board)
                    if isinstance(board, str)
                    else BoardSpec.from_dict(board)
                )
            if "intrinsics" in kwargs:
                kwargs["intrinsics"] = {
                    cid: CameraIntrinsics.from_dict(v) for cid, v in kwargs["intrinsics"].items()
                }
            if "trajectory" in kwargs:
                kwargs["trajectory"] = TrajectoryRecipe.from_dict(kwargs["trajectory"])
            for key in ("rotation_deg", "translation"):
                if key in kwargs:
                    kwargs[key] = tuple(float(v) for v in kwargs[key])
            return cls(**kwargs).validate()
        except (KeyError, TypeError, ValueError) as exc:
            raise ScenarioError(f"invalid scenario: {exc}") from exc


@dataclass
class GroundTruthBundle:
    """Detections of both cameras together with the truth that produced them"""

    spec: ScenarioSpec
    cameras: List[CameraData]
    params: SpatiotemporalParams
    reference_camera: str = REFERENCE_CAMERA
    target_camera: str = TARGET_CAMERA
    visible_fraction: float = 1.0

    @property
    def scenario_id(self) -> str:
        return self.spec.scenario_id

    @property
    def focus(self) -> np.ndarray:
        points = self.spec.board.object_points()
        return points.mean(axis=0)

    def pose(self, tau: Union[float, np.ndarray]) -> Pose:
        """Reference camera-to-world pose at reference time tau"""
        rotations, positions = self.spec.trajectory.poses(np.atleast_1d(tau), self.focus)
        return Pose(Rotation.from_matrix(rotations[0]), positions[0])

    def camera(self, camera_id: str) -> CameraData:
        return next(c for c in self.cameras if c.camera_id == camera_id)

    def to_calibration_input(self, config: Optional[Configuration] = None) -> CalibrationInput:
        return CalibrationInput(self.cameras, self.spec.board, config, self.scenario_id)


def _observe(
    rotations: np.ndarray,
    positions: np.ndarray,
    board_points: np.ndarray,
    intr: CameraIntrinsics,
    cos_cutoff: float,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Clean pixels (F, N, 2), survival mask before dropout and the full-board FOV mask (F,)"""
    rays = board_points[None, :, :] - positions[:, None, :]
    cam = np.einsum("fji,fnj->fni", rotations, rays)
    in_front = cam[..., 2] > MIN_DEPTH
    pixels = np.full(cam.shape[:2] + (2,), np.nan)
    pixels[in_front] = project_points(cam[in_front], intr)
    in_fov = in_front.copy()
    in_fov[in_front] = intr.in_image(pixels[in_front])
    cos_view = np.abs(rays[..., 2]) / np.linalg.norm(rays, axis=-1)
    survives = in_fov & (cos_view >= cos_cutoff)
    return pixels, survives, in_fov.all(axis=1)


def generate(spec: ScenarioSpec) -> GroundTruthBundle:
    """Detection streams of both cameras, reproducible bit for bit from the scenario and its seed"""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    board_points = spec.board.object_points()
    focus = board_points.mean(axis=0)
    n_circles = len(board_points)
    truth = spec.params
    times = np.arange(int(round(spec.duration * spec.frame_rate))) / spec.frame_rate
    if len(times) == 0:
        raise ScenarioError("scenario produces no frames")

    ref_rot, ref_pos = spec.trajectory.poses(times, focus)
    rot_x = truth.rotation.matrix()
    tar_rot = ref_rot @ rot_x
    tar_pos = ref_pos + ref_rot @ truth.translation
    cos_cutoff = float(np.cos(np.deg2rad(spec.oblique_cutoff_deg)))

    observed = {}
    board_in_view = np.ones(len(times), dtype=bool)
    for cid, rotations, positions in (
        (REFERENCE_CAMERA, ref_rot, ref_pos),
        (TARGET_CAMERA, tar_rot, tar_pos),
    ):
        pixels, survives, full_view = _observe(
            rotations, positions, board_points, spec.intrinsics[cid], cos_cutoff
        )
        observed[cid] = (pixels, survives)
        board_in_view &= full_view
    visible_fraction = float(board_in_view.mean())
    if visible_fraction < MIN_VISIBLE_FRACTION:
        raise ScenarioError(
            f"board fully inside both fields of view in {100 * visible_fraction:.1f}% of frames, "
            f"need {100 * MIN_VISIBLE_FRACTION:.0f}%"
        )

    cameras: List[CameraData] = []
    for cid, shift in ((REFERENCE_CAMERA, 0.0), (TARGET_CAMERA, spec.time_shift)):
        pixels, survives = observed[cid]
        # fixed draw counts per frame keep the stream independent of the masks
        noise = rng.normal(0.0, spec.noise_sigma, size=pixels.shape) if spec.noise_sigma else 0.0
        dropped = rng.random(survives.shape) < spec.dropout_rate
        permutations = rng.permuted(np.tile(np.arange(n_circles), (len(times), 1)), axis=1)
        noisy = pixels + noise
        keep = survives & ~dropped
        frames: List[EllipseFrame] = []
        patterns: List[GridPattern] = []
        for f, tau in enumerate(times):
            stamp = float(tau - shift)
            order = permutations[f][keep[f][permutations[f]]]
            if len(order) == 0:
                continue
            frames.append(EllipseFrame(stamp, noisy[f, order]))
            if keep[f].all():
                indices = np.arange(n_circles)
                patterns.append(
                    GridPattern.from_board(stamp, indices, noisy[f], spec.board, board_points)
                )
        cameras.append(
            CameraData(cid, spec.intrinsics[cid], PatternTrack(cid, patterns), frames)
        )
        logger.log_debug(
            f"Simulated camera '{cid}'",
            {"frames": len(frames), "complete patterns": len(patterns)},
        )

    return GroundTruthBundle(spec, cameras, truth, visible_fraction=visible_fraction)


# ----------------------------------------------------------------------------------------------
# Evaluation against ground truth
# ----------------------------------------------------------------------------------------------


@dataclass
class ErrorMetrics:
    """Estimate and error of one calibration run in degrees, centimeters and milliseconds"""

    geodesic_deg: float
    euler_error_deg: np.ndarray
    translation_error_cm: np.ndarray
    offset_error_ms: float
    estimate_euler_deg: np.ndarray
    estimate_translation_cm: np.ndarray
    estimate_offset_ms: float
    scenario_id: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "geodesic_deg": self.geodesic_deg,
            "euler_error_deg": np.asarray(self.euler_error_deg).tolist(),
            "translation_error_cm": np.asarray(self.translation_error_cm).tolist(),
            "offset_error_ms": self.offset_error_ms,
            "estimate_euler_deg": np.asarray(self.estimate_euler_deg).tolist(),
            "estimate_translation_cm": np.asarray(self.estimate_translation_cm).tolist(),
            "estimate_offset_ms": self.estimate_offset_ms,
            "scenario_id": self.scenario_id,
        }

    def values(self) -> Dict[str, float]:
        """Flat scalar view used for aggregation"""
        flat = {"geodesic_deg": self.geodesic_deg, "offset_error_ms": self.offset_error_ms}
        for name, vector in (
            ("euler_error_deg", self.euler_error_deg),
            ("translation_error_cm", self.translation_error_cm),
            ("estimate_euler_deg", self.estimate_euler_deg),
            ("estimate_translation_cm", self.estimate_translation_cm),
        ):
            for axis, value in zip("xyz", vector):
                flat[f"{name}_{axis}"] = float(value)
        flat["estimate_offset_ms"] = self.estimate_offset_ms
        return flat


def _oriented_truth(
    truth: SpatiotemporalParams, truth_reference: str, result_reference: str
) -> SpatiotemporalParams:
    """Truth expressed with the result's choice of reference camera"""
    if truth_reference == result_reference:
        return truth
    inverse = truth.extrinsic.inverse()
    return SpatiotemporalParams(inverse.rotation, inverse.translation, -truth.time_offset)


def evaluate(result: Any, truth: Any) -> ErrorMetrics:
    """Errors of a calibration result (or loaded report) against a truth bundle (or sidecar).

    Both sides need ``params``, ``reference_camera`` and ``scenario_id``.
    """
    if result.scenario_id and truth.scenario_id and result.scenario_id != truth.scenario_id:
        raise ScenarioError(
            f"result of scenario {result.scenario_id} evaluated against {truth.scenario_id}"
        )
    expected = _oriented_truth(truth.params, truth.reference_camera, result.reference_camera)
    estimate: SpatiotemporalParams = result.params
    error_rotation = estimate.rotation @ expected.rotation.inverse()
    return ErrorMetrics(
        geodesic_deg=float(np.rad2deg(estimate.rotation.angle_to(expected.rotation))),
        euler_error_deg=euler_xyz_degrees(error_rotation),
        translation_error_cm=100.0 * (estimate.translation - expected.translation),
        offset_error_ms=1000.0 * (estimate.time_offset - expected.time_offset),
        estimate_euler_deg=estimate.euler_degrees(),
        estimate_translation_cm=100.0 * estimate.translation,
        estimate_offset_ms=1000.0 * estimate.time_offset,
        scenario_id=truth.scenario_id,
    )


def aggregate(metrics: Sequence[ErrorMetrics]) -> Dict[str, Tuple[float, float]]:
    """Mean and sample standard deviation of every scalar metric"""
    if not metrics:
        return {}
    table = [m.values() for m in metrics]
    result: Dict[str, Tuple[float, float]] = {}
    for key in table[0]:
        column = np.array([row[key] for row in table])
        std = float(column.std(ddof=1)) if len(column) > 1 else 0.0
        result[key] = (float(column.mean()), std)
    return result


def metric_rows(summary: Dict[str, Tuple[float, float]], label: str = "") -> List[Dict[str, str]]:
    """Rows of "mean ± std" per quantity for the console logger"""
    groups = [
        ("Rotation (deg)", "estimate_euler_deg", "euler_error_deg"),
        ("Translation (cm)", "estimate_translation_cm", "translation_error_cm"),
    ]
    rows: List[Dict[str, str]] = []
    for title, estimate_key, error_key in groups:
        for axis in "xyz":
            mean, std = summary[f"{estimate_key}_{axis}"]
            err_mean, err_std = summary[f"{error_key}_{axis}"]
            rows.append(
                {
                    "Quantity": f"{label}{title} {axis.upper()}",
                    "Estimate": f"{mean:.4f} ± {std:.4f}",
                    "Error": f"{err_mean:+.4f} ± {err_std:.4f}",
                }
            )
    mean, std = summary["estimate_offset_ms"]
    err_mean, err_std = summary["offset_error_ms"]
    rows.append(
        {
            "Quantity": f"{label}Time offset (ms)",
            "Estimate": f"{mean:.4f} ± {std:.4f}",
            "Error": f"{err_mean:+.4f} ± {err_std:.4f}",
        }
    )
    mean, std = summary["geodesic_deg"]
    rows.append(
        {
            "Quantity": f"{label}Geodesic rotation (deg)",
            "Estimate": "",
            "Error": f"{mean:.4f} ± {std:.4f}",
        }
    )
    return rows


def run_sweep(
    spec: ScenarioSpec,
    seeds: Sequence[int],
    shifts: Sequence[float],
    config: Optional[Configuration] = None,
) -> Dict[float, List[ErrorMetrics]]:
    """Generate, calibrate and evaluate every (shift, seed) combination"""
    runs: Dict[float, List[ErrorMetrics]] = {}
    with logger.create_progress_bar("Monte-Carlo sweep") as progress:
        task = progress.add_task("runs", total=len(seeds) * len(shifts))
        for shift in shifts:
            runs[shift] = []
            for seed in seeds:
                bundle = generate(replace(spec, time_shift=shift, seed=seed))
                try:
                    result = run_calibration(bundle.to_calibration_input(config))
                except CalibrationError as exc:
                    logger.log_warning(f"run with shift {shift} s, seed {seed} failed: {exc}")
                    progress.advance(task)
                    continue
                runs[shift].append(evaluate(result, bundle))
                progress.advance(task)
    return runs
