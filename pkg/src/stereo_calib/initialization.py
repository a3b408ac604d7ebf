"""
Two-stage state initialization: per-pattern PnP, reference trajectory segmentation and spline
fitting, then hand-eye alignment of the target camera's motion against that trajectory with a
time-offset grid search followed by joint refinement.
"""

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    BehindCameraError,
    DegeneratePatternError,
    InsufficientOverlapError,
    InsufficientSpanError,
    PnPFailureError,
)
from .geometry import (
    MIN_DEPTH,
    CameraIntrinsics,
    Pose,
    Rotation,
    matrix_to_quat,
    project_points,
    projection_jacobian,
    quat_conjugate,
    quat_log,
    quat_multiply,
    quat_to_matrix,
    rotation_exp_batch,
    rotation_log_batch,
    skew,
)
from .logging import logger
from .models import (
    GridPattern,
    HandEyeSummary,
    PatternTrack,
    SegmentSummary,
    SpatiotemporalParams,
    TimedPose,
)
from .solver import (
    Manifold,
    ParameterBlock,
    Problem,
    ResidualBlock,
    SolverOptions,
    SolverReport,
    solve,
)
from .spline import (
    DEFAULT_KNOT_SPACING,
    PiecewiseTrajectory,
    PositionSpline,
    RotationSpline,
    TrajectorySegment,
    blend_positions,
    blend_rotations,
    position_weights,
)

DEFAULT_DT_THD = 0.1
DEFAULT_N_THD = 50
DEFAULT_OFFSET_BOUND = 0.15
DEFAULT_OFFSET_GRID_STEP = 0.001
DEFAULT_BA_OFFSET_WINDOW = 0.01
DEFAULT_PNP_MAX_RMS = 5.0
DEFAULT_SPLINE_FIT_MAX_ITERATIONS = 50
DEFAULT_SPLINE_FIT_TOLERANCE = 1e-10

PNP_MIN_POINTS = 4
PNP_MAX_ITERATIONS = 30
COLLINEAR_RATIO = 1e-6
MIN_HAND_EYE_PAIRS = 10
CONDITIONING_WARNING_RATIO = 1e-3


# ----------------------------------------------------------------------------------------------
# PnP
# ----------------------------------------------------------------------------------------------


@dataclass(frozen=True)
class PnPSolution:
    """Camera-to-world pose of one pattern and its RMS reprojection error in pixels"""

    pose: Pose
    rms: float
    iterations: int


def _hartley(points: np.ndarray) -> np.ndarray:
    centroid = points.mean(axis=0)
    mean_dist = np.mean(np.linalg.norm(points - centroid, axis=1))
    s = np.sqrt(2.0) / max(mean_dist, 1e-300)
    return np.array([[s, 0.0, -s * centroid[0]], [0.0, s, -s * centroid[1]], [0.0, 0.0, 1.0]])


def fit_homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Normalized DLT homography with dst ~ H @ src for (N, 2) point sets"""
    t_src, t_dst = _hartley(src), _hartley(dst)
    a = np.c_[src, np.ones(len(src))] @ t_src.T
    b = np.c_[dst, np.ones(len(dst))] @ t_dst.T
    zeros = np.zeros((len(a), 3))
    rows_u = np.hstack([-a, zeros, b[:, :1] * a])
    rows_v = np.hstack([zeros, -a, b[:, 1:2] * a])
    _, _, vt = np.linalg.svd(np.vstack([rows_u, rows_v]))
    h = vt[-1].reshape(3, 3)
    h = np.linalg.inv(t_dst) @ h @ t_src
    return h / h[2, 2]


def pose_from_homography(h: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """World-to-camera (R, t) from a board-to-normalized-image homography"""
    h1, h2, h3 = h[:, 0], h[:, 1], h[:, 2]
    lam = 1.0 / np.mean([np.linalg.norm(h1), np.linalg.norm(h2)])
    if lam * h3[2] < 0:
        lam = -lam
    r1, r2 = lam * h1, lam * h2
    approx = np.column_stack([r1, r2, np.cross(r1, r2)])
    u, _, vt = np.linalg.svd(approx)
    r = u @ vt
    if np.linalg.det(r) < 0:
        r = u @ np.diag([1.0, 1.0, -1.0]) @ vt
    return r, lam * h3


def _check_pattern_geometry(board_points: np.ndarray) -> None:
    if len(board_points) < PNP_MIN_POINTS:
        raise DegeneratePatternError(
            f"PnP needs at least {PNP_MIN_POINTS} points, got {len(board_points)}"
        )
    xy = board_points[:, :2] - board_points[:, :2].mean(axis=0)
    s = np.linalg.svd(xy, compute_uv=False)
    if s[0] == 0 or s[1] / s[0] < COLLINEAR_RATIO:
        raise DegeneratePatternError("pattern points are collinear")


def solve_pnp(
    pattern: GridPattern, intr: CameraIntrinsics, max_rms: float = DEFAULT_PNP_MAX_RMS
) -> PnPSolution:
    """Planar PnP: homography initialization refined by Gauss-Newton through the full model"""
    board = pattern.board_points
    observed = pattern.image_points
    _check_pattern_geometry(board)

    normalized = np.c_[(observed[:, 0] - intr.cx) / intr.fx, (observed[:, 1] - intr.cy) / intr.fy]
    r, t = pose_from_homography(fit_homography(board[:, :2], normalized))

    def residual(r: np.ndarray, t: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        pc = board @ r.T + t
        if np.any(pc[:, 2] <= MIN_DEPTH):
            raise PnPFailureError(
                f"board behind the camera during refinement at t={pattern.timestamp}"
            )
        return pc, (project_points(pc, intr) - observed).ravel()

    pc, e = residual(r, t)
    cost = float(e @ e)
    iterations = 0
    for iterations in range(1, PNP_MAX_ITERATIONS + 1):
        jp = projection_jacobian(pc, intr)
        rotated = board @ r.T
        jac = np.concatenate([jp @ -skew(rotated), jp], axis=2).reshape(-1, 6)
        delta = np.linalg.lstsq(jac, -e, rcond=None)[0]
        step = 1.0
        while step > 1e-6:
            r_new = rotation_exp_batch(step * delta[:3]) @ r
            t_new = t + step * delta[3:]
            try:
                pc_new, e_new = residual(r_new, t_new)
            except PnPFailureError:
                step *= 0.5
                continue
            if float(e_new @ e_new) <= cost:
                break
            step *= 0.5
        else:
            break
        r, t, pc, e = r_new, t_new, pc_new, e_new
        cost = float(e @ e)
        if np.linalg.norm(step * delta) < 1e-12:
            break

    rms = float(np.sqrt(cost / len(board)))
    if not np.isfinite(rms) or rms > max_rms:
        raise PnPFailureError(f"PnP RMS {rms:.3f} px exceeds {max_rms} px at t={pattern.timestamp}")
    world_to_camera = Pose(Rotation.from_matrix(r), t)
    return PnPSolution(world_to_camera.inverse(), rms, iterations)


def estimate_poses(
    track: PatternTrack,
    intr: CameraIntrinsics,
    max_rms: float = DEFAULT_PNP_MAX_RMS,
    complete_only: bool = False,
) -> Tuple[List[TimedPose], int]:
    """PnP poses of every usable pattern and the number of patterns that failed"""
    poses: List[TimedPose] = []
    failures = 0
    for index, pattern in enumerate(track):
        if complete_only and not pattern.complete:
            continue
        if len(pattern) < PNP_MIN_POINTS:
            continue
        try:
            solution = solve_pnp(pattern, intr, max_rms)
        except (DegeneratePatternError, PnPFailureError, BehindCameraError) as exc:
            failures += 1
            logger.log_debug(f"PnP skipped pattern {index} of '{track.camera_id}': {exc}")
            continue
        poses.append(TimedPose(solution.pose, pattern.timestamp, index, solution.rms))
    return poses, failures


# ----------------------------------------------------------------------------------------------
# Trajectory segmentation and spline fitting
# ----------------------------------------------------------------------------------------------


def segment_poses(
    poses: Sequence[TimedPose], dt_thd: float = DEFAULT_DT_THD, n_thd: int = DEFAULT_N_THD
) -> List[List[TimedPose]]:
    """Maximal runs with consecutive gaps below dt_thd; runs of n_thd poses or fewer are dropped"""
    runs: List[List[TimedPose]] = []
    current: List[TimedPose] = []
    for pose in poses:
        if current and not pose.timestamp - current[-1].timestamp < dt_thd:
            runs.append(current)
            current = []
        current.append(pose)
    if current:
        runs.append(current)
    return [run for run in runs if len(run) > n_thd]


def _nearest_indices(times: np.ndarray, queries: np.ndarray) -> np.ndarray:
    idx = np.clip(np.searchsorted(times, queries), 1, len(times) - 1)
    left_closer = (queries - times[idx - 1]) <= (times[idx] - queries)
    return np.where(left_closer, idx - 1, idx)


def _spline_layout(t_first: float, t_last: float, spacing: float) -> Tuple[float, int]:
    """Start time and control-point count whose valid interval covers [t_first, t_last]"""
    span = t_last - t_first
    if span < 4.0 * spacing:
        raise InsufficientSpanError(
            f"pose run spans {span:.4f} s, fewer than 4 knot intervals of {spacing} s"
        )
    # knots stay on the grid of t_first; only rounding of start + spacing is corrected
    start = t_first - spacing
    while start + spacing > t_first:
        start = float(np.nextafter(start, -np.inf))
    return start, int(np.floor(span / spacing + 1e-6)) + 4


def _grouped_by_interval(s: np.ndarray) -> Dict[int, np.ndarray]:
    return {int(k): np.flatnonzero(s == k) for k in np.unique(s)}


def _rotation_fit_residual(u: np.ndarray, measured: np.ndarray) -> Callable[..., np.ndarray]:
    first = np.zeros(len(u), dtype=int)

    def residual(*quats: np.ndarray) -> np.ndarray:
        fitted = blend_rotations(np.stack(quats), first, u)
        return quat_log(quat_multiply(fitted, quat_conjugate(measured))).ravel()

    return residual


def _position_fit_residual(
    u: np.ndarray, measured: np.ndarray
) -> Tuple[Callable[..., np.ndarray], Callable[..., Dict[int, np.ndarray]]]:
    first = np.zeros(len(u), dtype=int)
    weights = position_weights(u)

    def residual(*points: np.ndarray) -> np.ndarray:
        return (blend_positions(np.stack(points), first, u) - measured).ravel()

    def jacobian(*points: np.ndarray) -> Dict[int, np.ndarray]:
        eye = np.eye(3)
        return {m: (weights[:, m, None, None] * eye).reshape(-1, 3) for m in range(4)}

    return residual, jacobian


def fit_spline_segment(
    run: Sequence[TimedPose],
    knot_spacing_rot: float = DEFAULT_KNOT_SPACING,
    knot_spacing_pos: Optional[float] = None,
    options: Optional[SolverOptions] = None,
) -> TrajectorySegment:
    """Fit rotation and position splines to a pose run by nearest-pose seeding and LM"""
    knot_spacing_pos = knot_spacing_rot if knot_spacing_pos is None else knot_spacing_pos
    options = options or SolverOptions(
        max_iterations=DEFAULT_SPLINE_FIT_MAX_ITERATIONS,
        function_tolerance=DEFAULT_SPLINE_FIT_TOLERANCE,
    )
    times = np.array([p.timestamp for p in run])
    quats = np.array([p.pose.rotation.quaternion for p in run])
    positions = np.array([p.pose.translation for p in run])

    start_r, count_r = _spline_layout(times[0], times[-1], knot_spacing_rot)
    start_p, count_p = _spline_layout(times[0], times[-1], knot_spacing_pos)
    seed_r = quats[_nearest_indices(times, start_r + np.arange(count_r) * knot_spacing_rot)]
    seed_p = positions[_nearest_indices(times, start_p + np.arange(count_p) * knot_spacing_pos)]
    rot_spline = RotationSpline(start_r, knot_spacing_rot, seed_r)
    pos_spline = PositionSpline(start_p, knot_spacing_pos, seed_p)

    problem = Problem()
    for m in range(count_r):
        problem.add_parameter_block(ParameterBlock(("rot", m), seed_r[m], Manifold.SO3))
    for m in range(count_p):
        problem.add_parameter_block(ParameterBlock(("pos", m), seed_p[m]))

    s_r, u_r = rot_spline.locate(times)
    for s, rows in _grouped_by_interval(s_r).items():
        problem.add_residual_block(
            ResidualBlock(
                3 * len(rows),
                [("rot", m) for m in range(s - 1, s + 3)],
                _rotation_fit_residual(u_r[rows], quats[rows]),
                group="rotation",
            )
        )
    s_p, u_p = pos_spline.locate(times)
    for s, rows in _grouped_by_interval(s_p).items():
        function, jacobian = _position_fit_residual(u_p[rows], positions[rows])
        problem.add_residual_block(
            ResidualBlock(
                3 * len(rows),
                [("pos", m) for m in range(s - 1, s + 3)],
                function,
                jacobian=jacobian,
                group="position",
            )
        )

    report = solve(problem, options)
    logger.log_debug(
        f"Spline fit over [{times[0]:.3f}, {times[-1]:.3f}] s",
        {"poses": len(run), "iterations": report.iterations, "cost": f"{report.final_cost:.3e}"},
    )
    rot_spline = rot_spline.with_control_points(
        np.array([problem[("rot", m)].value for m in range(count_r)])
    )
    pos_spline = pos_spline.with_control_points(
        np.array([problem[("pos", m)].value for m in range(count_p)])
    )
    t_max = min(rot_spline.valid_interval[1], pos_spline.valid_interval[1])
    return TrajectorySegment(rot_spline, pos_spline, float(times[0]), t_max)


def segment_summary(segment: TrajectorySegment, run: Sequence[TimedPose]) -> SegmentSummary:
    """RMS rotation (rad) and position (m) misfit of a segment against its pose run"""
    times = np.array([p.timestamp for p in run])
    quats = np.array([p.pose.rotation.quaternion for p in run])
    positions = np.array([p.pose.translation for p in run])
    fitted_q = segment.rotation_spline.evaluate_quaternions(times)
    rot_err = quat_log(quat_multiply(fitted_q, quat_conjugate(quats)))
    pos_err = segment.position_spline.evaluate(times) - positions
    return SegmentSummary(
        t_min=segment.t_min,
        t_max=segment.t_max,
        pose_count=len(run),
        rms_rotation=float(np.sqrt(np.mean(np.sum(rot_err**2, axis=1)))),
        rms_position=float(np.sqrt(np.mean(np.sum(pos_err**2, axis=1)))),
    )


def build_trajectory(
    poses: Sequence[TimedPose],
    dt_thd: float = DEFAULT_DT_THD,
    n_thd: int = DEFAULT_N_THD,
    knot_spacing_rot: float = DEFAULT_KNOT_SPACING,
    knot_spacing_pos: Optional[float] = None,
    options: Optional[SolverOptions] = None,
) -> Tuple[PiecewiseTrajectory, List[SegmentSummary]]:
    """Segment the poses, fit one spline pair per run and clip segments to be disjoint"""
    runs = segment_poses(poses, dt_thd, n_thd)
    fitted: List[Tuple[TrajectorySegment, List[TimedPose]]] = []
    for run in runs:
        try:
            segment = fit_spline_segment(run, knot_spacing_rot, knot_spacing_pos, options)
            fitted.append((segment, run))
        except InsufficientSpanError as exc:
            logger.log_debug(f"Pose run skipped: {exc}")
    segments: List[TrajectorySegment] = []
    summaries: List[SegmentSummary] = []
    for i, (segment, run) in enumerate(fitted):
        if i + 1 < len(fitted) and segment.t_max > fitted[i + 1][0].t_min:
            segment = TrajectorySegment(
                segment.rotation_spline,
                segment.position_spline,
                segment.t_min,
                fitted[i + 1][0].t_min,
            )
        segments.append(segment)
        summaries.append(segment_summary(segment, run))
    return PiecewiseTrajectory(tuple(segments)), summaries


# ----------------------------------------------------------------------------------------------
# Hand-eye spatiotemporal initialization
# ----------------------------------------------------------------------------------------------


def _relative_motion(
    rotations: np.ndarray, positions: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Motion of frame k+1 expressed in frame k for camera-to-world pose pairs (2, n, ...)"""
    r0, r1 = rotations
    p0, p1 = positions
    r0t = np.swapaxes(r0, -1, -2)
    return r0t @ r1, np.einsum("nij,nj->ni", r0t, p1 - p0)


def hand_eye_residuals(
    rot_a: np.ndarray,
    trans_a: np.ndarray,
    rot_b: np.ndarray,
    trans_b: np.ndarray,
    rot_x: np.ndarray,
    trans_x: np.ndarray,
) -> np.ndarray:
    """Decoupled Log(B_hat * B^-1) per pair, B_hat = X^-1 A X, shape (n, 6)"""
    rxt = rot_x.T
    rot_pred = rxt @ rot_a @ rot_x
    trans_pred = (np.einsum("nij,j->ni", rot_a, trans_x) + trans_a - trans_x) @ rxt.T
    rot_err = rot_pred @ np.swapaxes(rot_b, -1, -2)
    trans_err = trans_pred - np.einsum("nij,nj->ni", rot_err, trans_b)
    return np.concatenate([rotation_log_batch(rot_err), trans_err], axis=1)


def hand_eye_closed_form(
    rot_a: np.ndarray, trans_a: np.ndarray, rot_b: np.ndarray, trans_b: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, float]:
    """Rotation-then-translation solution of A X = X B and the rotation conditioning ratio"""
    alpha = rotation_log_batch(rot_a)
    beta = rotation_log_batch(rot_b)
    m = alpha.T @ beta
    u, s, vt = np.linalg.svd(m)
    d = np.sign(np.linalg.det(u @ vt)) or 1.0
    rot_x = u @ np.diag([1.0, 1.0, d]) @ vt
    ratio = float(s[2] / s[0]) if s[0] > 1e-12 else 0.0
    lhs = (rot_a - np.eye(3)).reshape(-1, 3)
    rhs = (trans_b @ rot_x.T - trans_a).reshape(-1)
    trans_x = np.linalg.lstsq(lhs, rhs, rcond=None)[0]
    return rot_x, trans_x, ratio


class HandEyeInitializer:
    """Offset grid search with closed-form extrinsics per cell, then joint LM refinement"""

    def __init__(
        self,
        trajectory: PiecewiseTrajectory,
        target_poses: Sequence[TimedPose],
        offset_bound: float = DEFAULT_OFFSET_BOUND,
        grid_step: float = DEFAULT_OFFSET_GRID_STEP,
        options: Optional[SolverOptions] = None,
    ):
        self.trajectory = trajectory
        self.offset_bound = offset_bound
        self.grid_step = grid_step
        self.options = options or SolverOptions()

        poses = sorted(target_poses, key=lambda p: p.timestamp)
        times = np.array([p.timestamp for p in poses])
        covered = np.array(
            [trajectory.covering_segment(t - offset_bound, t + offset_bound) >= 0 for t in times],
            dtype=bool,
        )
        pairs = np.flatnonzero(covered[:-1] & covered[1:]) if len(poses) > 1 else np.zeros(0, int)
        if len(pairs) < MIN_HAND_EYE_PAIRS:
            raise InsufficientOverlapError(
                f"{len(pairs)} target pose pairs stay on the reference trajectory over "
                f"+/-{offset_bound} s, need {MIN_HAND_EYE_PAIRS}"
            )
        self.pair_count = len(pairs)
        self.times = np.stack([times[pairs], times[pairs + 1]])
        rotations = np.array([p.pose.rotation.matrix() for p in poses])
        positions = np.array([p.pose.translation for p in poses])
        self.rot_b, self.trans_b = _relative_motion(
            np.stack([rotations[pairs], rotations[pairs + 1]]),
            np.stack([positions[pairs], positions[pairs + 1]]),
        )

    def reference_motion(self, offset: float) -> Tuple[np.ndarray, np.ndarray]:
        rotations, positions, _ = self.trajectory.poses((self.times + offset).ravel())
        n = self.pair_count
        return _relative_motion(rotations.reshape(2, n, 3, 3), positions.reshape(2, n, 3))

    def cost(self, rot_x: np.ndarray, trans_x: np.ndarray, offset: float) -> float:
        rot_a, trans_a = self.reference_motion(offset)
        r = hand_eye_residuals(rot_a, trans_a, self.rot_b, self.trans_b, rot_x, trans_x)
        return 0.5 * float(np.sum(r * r))

    def grid_search(self) -> Tuple[float, np.ndarray, np.ndarray, float, float]:
        """Best offset cell: offset, rotation, translation, cost and conditioning ratio"""
        bound, step = self.offset_bound, self.grid_step
        offsets = np.clip(np.arange(-bound, bound + 0.5 * step, step), -bound, bound)
        best: Optional[Tuple[float, np.ndarray, np.ndarray, float, float]] = None
        with logger.create_progress_bar("Hand-eye offset search") as progress:
            task = progress.add_task("offsets", total=len(offsets))
            for offset in offsets:
                rot_a, trans_a = self.reference_motion(float(offset))
                rot_x, trans_x, ratio = hand_eye_closed_form(
                    rot_a, trans_a, self.rot_b, self.trans_b
                )
                r = hand_eye_residuals(rot_a, trans_a, self.rot_b, self.trans_b, rot_x, trans_x)
                cost = 0.5 * float(np.sum(r * r))
                if best is None or cost < best[3]:
                    best = (float(offset), rot_x, trans_x, cost, ratio)
                progress.advance(task)
        assert best is not None
        return best

    def refine(
        self, rot_x: np.ndarray, trans_x: np.ndarray, offset: float
    ) -> Tuple[SpatiotemporalParams, SolverReport]:
        problem = Problem()
        problem.add_parameter_block(ParameterBlock("ext_rot", matrix_to_quat(rot_x), Manifold.SO3))
        problem.add_parameter_block(ParameterBlock("ext_trans", trans_x))
        problem.add_parameter_block(
            ParameterBlock(
                "time_offset", [offset], lower=[-self.offset_bound], upper=[self.offset_bound]
            )
        )

        def residual(q: np.ndarray, t: np.ndarray, delta: np.ndarray) -> np.ndarray:
            rot_a, trans_a = self.reference_motion(float(delta[0]))
            return hand_eye_residuals(
                rot_a, trans_a, self.rot_b, self.trans_b, quat_to_matrix(q), t
            ).ravel()

        problem.add_residual_block(
            ResidualBlock(
                6 * self.pair_count,
                ["ext_rot", "ext_trans", "time_offset"],
                residual,
                group="hand_eye",
            )
        )
        report = solve(problem, self.options)
        params = SpatiotemporalParams(
            Rotation(problem["ext_rot"].value),
            problem["ext_trans"].value,
            float(problem["time_offset"].value[0]),
        )
        return params, report

    def run(self) -> Tuple[SpatiotemporalParams, HandEyeSummary, SolverReport]:
        offset, rot_x, trans_x, seed_cost, ratio = self.grid_search()
        if ratio < CONDITIONING_WARNING_RATIO:
            logger.log_warning(
                f"rotation alignment is poorly conditioned (ratio {ratio:.2e}); "
                "motion may not excite all rotation axes"
            )
        params, report = self.refine(rot_x, trans_x, offset)
        summary = HandEyeSummary(
            pair_count=self.pair_count,
            seed_offset=offset,
            seed_cost=seed_cost,
            refined_cost=report.final_cost,
            conditioning_ratio=ratio,
        )
        return params, summary, report


def hand_eye_init(
    traj: PiecewiseTrajectory,
    target_poses: Sequence[TimedPose],
    offset_bound: float = DEFAULT_OFFSET_BOUND,
    grid_step: float = DEFAULT_OFFSET_GRID_STEP,
    options: Optional[SolverOptions] = None,
) -> SpatiotemporalParams:
    """Extrinsics and time offset of the target camera w.r.t. the reference trajectory"""
    params, _, _ = HandEyeInitializer(traj, target_poses, offset_bound, grid_step, options).run()
    return params
