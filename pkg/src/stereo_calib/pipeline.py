"""
End-to-end calibration: incomplete-pattern tracking, reference selection, PnP, reference
trajectory fitting, hand-eye initialization and continuous-time bundle adjustment.
"""

import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Hashable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .config import Configuration
from .errors import (
    CalibrationError,
    InsufficientCoverageError,
    InsufficientDataError,
    InvalidArgumentError,
    StageError,
)
from .geometry import CameraIntrinsics, Rotation, project_points, quat_to_matrix
from .initialization import (
    DEFAULT_BA_OFFSET_WINDOW,
    DEFAULT_OFFSET_BOUND,
    HandEyeInitializer,
    build_trajectory,
    estimate_poses,
)
from .logging import logger
from .models import (
    CalibrationInput,
    CalibrationResult,
    CameraData,
    PatternTrack,
    ResidualStats,
    SpatiotemporalParams,
)
from .solver import (
    DEFAULT_HUBER_DELTA,
    HuberLoss,
    Manifold,
    ParameterBlock,
    Problem,
    ResidualBlock,
    SolverReport,
    solve,
)
from .spline import PiecewiseTrajectory, blend_positions, blend_rotations
from .tracking import select_reference, track_incomplete, tracking_stats

HISTOGRAM_BIN_WIDTH = 0.02  # px
HISTOGRAM_HALF_RANGE = 0.5  # px


# ----------------------------------------------------------------------------------------------
# Bundle adjustment problem
# ----------------------------------------------------------------------------------------------


@dataclass
class _Observations:
    """Pattern points of one residual block, flattened point by point"""

    times: np.ndarray  # per pattern
    pattern_of_point: np.ndarray
    board_points: np.ndarray
    image_points: np.ndarray


@dataclass
class BundleAdjustmentProblem:
    """Reprojection problem over the reference trajectory and the spatiotemporal parameters"""

    problem: Problem
    trajectory: PiecewiseTrajectory
    reference_camera: str
    target_camera: str
    excluded: Dict[str, int] = field(default_factory=dict)
    residual_counts: Dict[str, int] = field(default_factory=dict)

    def trajectory_state(self) -> PiecewiseTrajectory:
        """Trajectory rebuilt from the current control-point blocks"""
        segments = []
        for i, segment in enumerate(self.trajectory.segments):
            rotations = np.array(
                [self.problem[("rot", i, m)].value for m in range(segment.rotation_spline.count)]
            )
            positions = np.array(
                [self.problem[("pos", i, m)].value for m in range(segment.position_spline.count)]
            )
            segments.append(segment.with_control_points(rotations, positions))
        return PiecewiseTrajectory(tuple(segments))

    def params_state(self) -> SpatiotemporalParams:
        return SpatiotemporalParams(
            Rotation(self.problem["ext_rot"].value),
            self.problem["ext_trans"].value,
            float(self.problem["time_offset"].value[0]),
        )

    def camera_residuals(self) -> Dict[str, np.ndarray]:
        """(N, 2) reprojection errors per camera at the current state"""
        _, residuals = self.problem.evaluate()
        per_camera: Dict[str, List[np.ndarray]] = {
            self.reference_camera: [],
            self.target_camera: [],
        }
        for block, r in zip(self.problem.residuals, residuals):
            per_camera[block.group].append(r.reshape(-1, 2))
        return {
            camera: np.concatenate(chunks) if chunks else np.zeros((0, 2))
            for camera, chunks in per_camera.items()
        }


def _pattern_arrays(
    track: PatternTrack, indices: Sequence[int]
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    patterns = [track[i] for i in indices]
    times = np.array([p.timestamp for p in patterns])
    pattern_of_point = np.concatenate([np.full(len(p), k) for k, p in enumerate(patterns)])
    board = np.concatenate([p.board_points for p in patterns])
    image = np.concatenate([p.image_points for p in patterns])
    return times, pattern_of_point, board, image


def _reprojection_residual(
    obs: _Observations,
    intr: CameraIntrinsics,
    rot_layout: Tuple[float, float, int, int],
    pos_layout: Tuple[float, float, int, int],
    with_extrinsics: bool,
) -> Callable[..., np.ndarray]:
    """Residual over a window of control points; one pose query per pattern"""
    r_start, r_dt, r_first, r_count = rot_layout
    p_start, p_dt, p_first, p_count = pos_layout

    def local_interval(
        taus: np.ndarray, start: float, dt: float, first: int, count: int
    ) -> Tuple[np.ndarray, np.ndarray]:
        x = (taus - start) / dt
        s = np.clip(np.floor(x).astype(int), first + 1, first + count - 3)
        return s - 1 - first, x - s

    def residual(*args: np.ndarray) -> np.ndarray:
        quats = np.stack(args[:r_count])
        points = np.stack(args[r_count : r_count + p_count])
        taus = obs.times
        if with_extrinsics:
            ext_q, ext_t, offset = args[r_count + p_count :]
            taus = taus + offset[0]
        local, u = local_interval(taus, r_start, r_dt, r_first, r_count)
        rot_wc = quat_to_matrix(blend_rotations(quats, local, u))
        local, u = local_interval(taus, p_start, p_dt, p_first, p_count)
        pos_wc = blend_positions(points, local, u)
        if with_extrinsics:
            rot_x = quat_to_matrix(ext_q)
            pos_wc = pos_wc + rot_wc @ ext_t
            rot_wc = rot_wc @ rot_x
        k = obs.pattern_of_point
        cam = np.einsum("nji,nj->ni", rot_wc[k], obs.board_points - pos_wc[k])
        return (project_points(cam, intr) - obs.image_points).ravel()

    return residual


def build_ba_problem(
    traj: PiecewiseTrajectory,
    st: SpatiotemporalParams,
    tracks: Dict[str, PatternTrack],
    intrinsics: Dict[str, CameraIntrinsics],
    reference_camera: str,
    huber_delta: float = DEFAULT_HUBER_DELTA,
    offset_window: float = DEFAULT_BA_OFFSET_WINDOW,
    offset_bound: float = DEFAULT_OFFSET_BOUND,
) -> BundleAdjustmentProblem:
    """Huber-robust reprojection problem of both cameras against the reference trajectory.

    Patterns whose query time, over the whole offset box for the target camera, leaves every
    segment are excluded and counted per camera.
    """
    if len(tracks) != 2 or reference_camera not in tracks:
        raise InvalidArgumentError("bundle adjustment needs the reference and one target track")
    target_camera = next(c for c in tracks if c != reference_camera)

    problem = Problem()
    for i, segment in enumerate(traj.segments):
        for m, q in enumerate(segment.rotation_spline.control_points):
            problem.add_parameter_block(ParameterBlock(("rot", i, m), q, Manifold.SO3))
        for m, p in enumerate(segment.position_spline.control_points):
            problem.add_parameter_block(ParameterBlock(("pos", i, m), p))
    problem.add_parameter_block(ParameterBlock("ext_rot", st.rotation.quaternion, Manifold.SO3))
    problem.add_parameter_block(ParameterBlock("ext_trans", st.translation))
    lower = max(st.time_offset - offset_window, -offset_bound)
    upper = min(st.time_offset + offset_window, offset_bound)
    problem.add_parameter_block(
        ParameterBlock("time_offset", [st.time_offset], lower=[lower], upper=[upper])
    )

    ba = BundleAdjustmentProblem(problem, traj, reference_camera, target_camera)
    loss = HuberLoss(huber_delta)
    for camera in (reference_camera, target_camera):
        is_target = camera == target_camera
        lo, hi = (lower, upper) if is_target else (0.0, 0.0)
        groups: Dict[Tuple[int, ...], List[int]] = {}
        excluded = 0
        for k, pattern in enumerate(tracks[camera]):
            index = traj.covering_segment(pattern.timestamp + lo, pattern.timestamp + hi)
            if index < 0:
                excluded += 2 * len(pattern)
                continue
            segment = traj.segments[index]
            window_lo, window_hi = pattern.timestamp + lo, pattern.timestamp + hi
            key = (
                index,
                *segment.rotation_spline.footprint(window_lo, window_hi),
                *segment.position_spline.footprint(window_lo, window_hi),
            )
            groups.setdefault(key, []).append(k)

        count = 0
        for (index, r_first, r_count, p_first, p_count), members in groups.items():
            segment = traj.segments[index]
            times, pattern_of_point, board, image = _pattern_arrays(tracks[camera], members)
            obs = _Observations(times, pattern_of_point, board, image)
            ids: List[Hashable] = [("rot", index, r_first + j) for j in range(r_count)]
            ids += [("pos", index, p_first + j) for j in range(p_count)]
            if is_target:
                ids += ["ext_rot", "ext_trans", "time_offset"]
            rot_layout = (
                segment.rotation_spline.start_time,
                segment.rotation_spline.knot_spacing,
                r_first,
                r_count,
            )
            pos_layout = (
                segment.position_spline.start_time,
                segment.position_spline.knot_spacing,
                p_first,
                p_count,
            )
            problem.add_residual_block(
                ResidualBlock(
                    2 * len(image),
                    ids,
                    _reprojection_residual(
                        obs, intrinsics[camera], rot_layout, pos_layout, is_target
                    ),
                    loss=loss,
                    loss_chunk=2,
                    group=camera,
                    name=f"{camera}@{times[0]:.4f}",
                )
            )
            count += 2 * len(image)
        ba.excluded[camera] = excluded
        ba.residual_counts[camera] = count

    if not problem.residuals:
        raise InsufficientCoverageError("no reprojection residual falls inside the trajectory")
    logger.log_debug(
        "Bundle adjustment problem",
        {
            "residual blocks": len(problem.residuals),
            "residuals": ba.residual_counts,
            "excluded": ba.excluded,
        },
    )
    return ba


def compute_residual_stats(ba: BundleAdjustmentProblem) -> Dict[str, ResidualStats]:
    """Mean, per-axis sigma and a fixed-bin 2D histogram of the errors of each camera"""
    edges = np.linspace(
        -HISTOGRAM_HALF_RANGE,
        HISTOGRAM_HALF_RANGE,
        int(round(2 * HISTOGRAM_HALF_RANGE / HISTOGRAM_BIN_WIDTH)) + 1,
    )
    stats: Dict[str, ResidualStats] = {}
    for camera, errors in ba.camera_residuals().items():
        # values beyond the range land in the outermost bins
        clipped = np.clip(errors, edges[0], edges[-1])
        histogram, _, _ = np.histogram2d(clipped[:, 0], clipped[:, 1], bins=[edges, edges])
        empty = len(errors) == 0
        stats[camera] = ResidualStats(
            camera_id=camera,
            count=len(errors),
            excluded=ba.excluded.get(camera, 0) // 2,
            mean=np.zeros(2) if empty else errors.mean(axis=0),
            sigma=np.zeros(2) if empty else errors.std(axis=0),
            rms=0.0 if empty else float(np.sqrt(np.mean(np.sum(errors**2, axis=1)))),
            histogram=histogram.astype(int),
            bin_edges=edges,
        )
    return stats


# ----------------------------------------------------------------------------------------------
# Orchestration
# ----------------------------------------------------------------------------------------------


class StereoCalibrator:
    """Stereo spatiotemporal calibration orchestrator"""

    def __init__(self, config: Optional[Configuration] = None):
        self.config = (config or Configuration()).validate()
        self.timings: Dict[str, float] = {}

    @contextmanager
    def _stage(self, name: str) -> Iterator[None]:
        logger.log_stage_start(name)
        started = time.perf_counter()
        try:
            yield
        except StageError:
            raise
        except CalibrationError as exc:
            logger.log_error(str(exc), f"stage {name}")
            raise StageError(name, exc) from exc
        finally:
            self.timings[name] = time.perf_counter() - started
        logger.log_stage_done(name, self.timings[name])

    def _check_input(self, inp: CalibrationInput) -> Tuple[CameraData, CameraData]:
        if len(inp.cameras) != 2:
            raise InvalidArgumentError(
                f"stereo calibration needs exactly two cameras, got {len(inp.cameras)}"
            )
        first, second = inp.cameras
        if first.camera_id == second.camera_id:
            raise InvalidArgumentError(f"camera ids must differ, both are '{first.camera_id}'")
        for camera in (first, second):
            if len(camera.complete_track) == 0:
                raise InsufficientDataError(f"camera '{camera.camera_id}' has no complete patterns")
        forced = self.config.reference_camera
        if forced is not None and forced not in (first.camera_id, second.camera_id):
            raise InvalidArgumentError(f"reference camera '{forced}' is not in the input")
        return first, second

    def run(self, inp: CalibrationInput) -> CalibrationResult:
        config = self.config
        first, second = self._check_input(inp)
        cameras = {first.camera_id: first, second.camera_id: second}
        self.timings = {}

        with self._stage("tracking"):
            tracks = {
                cid: track_incomplete(
                    cam.complete_track,
                    cam.ellipse_frames,
                    inp.board,
                    config.d_thd,
                    config.min_points,
                    config.max_traversal_offset,
                )
                for cid, cam in cameras.items()
            }
            stats = {
                cid: tracking_stats(tracks[cid], cameras[cid].ellipse_frames) for cid in tracks
            }
        logger.log_tracking_stats(list(stats.values()))

        with self._stage("reference"):
            reference = config.reference_camera or select_reference(
                tracks[first.camera_id], tracks[second.camera_id]
            )
            target = second.camera_id if reference == first.camera_id else first.camera_id
            logger.log_debug(f"Reference camera '{reference}', target camera '{target}'")

        with self._stage("pnp"):
            ref_poses, ref_failures = estimate_poses(
                tracks[reference], cameras[reference].intrinsics, config.pnp_max_rms, True
            )
            tar_poses, tar_failures = estimate_poses(
                tracks[target], cameras[target].intrinsics, config.pnp_max_rms
            )
            for cid, poses in ((reference, ref_poses), (target, tar_poses)):
                if not poses:
                    raise InsufficientDataError(f"no PnP pose for camera '{cid}'")

        with self._stage("trajectory"):
            trajectory, segments = build_trajectory(
                ref_poses,
                config.dt_thd,
                config.n_thd,
                config.knot_spacing_rot,
                config.knot_spacing_pos,
                config.spline_fit_options(),
            )
            if len(trajectory) == 0:
                raise InsufficientDataError(
                    f"no run of more than {config.n_thd} poses with gaps below {config.dt_thd} s"
                )

        reports: Dict[str, SolverReport] = {}
        with self._stage("hand_eye"):
            initializer = HandEyeInitializer(
                trajectory,
                tar_poses,
                config.offset_bound,
                config.offset_grid_step,
                config.solver_options(),
            )
            initial, hand_eye, reports["hand_eye"] = initializer.run()
        logger.log_spatiotemporal(initial, "Hand-eye initialization")

        with self._stage("bundle_adjustment"):
            ba = build_ba_problem(
                trajectory,
                initial,
                tracks,
                {cid: cam.intrinsics for cid, cam in cameras.items()},
                reference,
                config.huber_delta,
                config.ba_offset_window,
                config.offset_bound,
            )
            reports["bundle_adjustment"] = solve(ba.problem, config.solver_options())
        logger.log_solver_report("bundle adjustment", reports["bundle_adjustment"])

        with self._stage("report"):
            params = ba.params_state()
            result = CalibrationResult(
                params=params,
                trajectory=ba.trajectory_state(),
                reference_camera=reference,
                target_camera=target,
                residual_stats=compute_residual_stats(ba),
                solver_reports=reports,
                tracking_stats=stats,
                segments=segments,
                hand_eye=hand_eye,
                pnp_failures={reference: ref_failures, target: tar_failures},
                timings=self.timings,
                scenario_id=inp.scenario_id,
            )
        logger.log_spatiotemporal(params, "Calibration result")
        return result


def run_calibration(inp: CalibrationInput) -> CalibrationResult:
    """Calibrate extrinsics and time offset of the target camera w.r.t. the reference"""
    return StereoCalibrator(inp.config).run(inp)
