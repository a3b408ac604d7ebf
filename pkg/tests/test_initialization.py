"""
Tests for PnP, pose-run segmentation, spline fitting and hand-eye initialization
"""

from unittest.mock import patch

import numpy as np
import pytest
from src.stereo_calib.errors import (
    DegeneratePatternError,
    InsufficientOverlapError,
    InsufficientSpanError,
    PnPFailureError,
)
from src.stereo_calib.geometry import CameraIntrinsics, Pose, Rotation, project_points
from src.stereo_calib.initialization import (
    HandEyeInitializer,
    build_trajectory,
    estimate_poses,
    fit_homography,
    fit_spline_segment,
    hand_eye_closed_form,
    hand_eye_init,
    segment_poses,
    segment_summary,
    solve_pnp,
)
from src.stereo_calib.models import BoardSpec, GridPattern, PatternTrack, TimedPose
from src.stereo_calib.spline import PiecewiseTrajectory, eval_pose, make_segment


@pytest.fixture
def board():
    return BoardSpec.preset("4x9")


@pytest.fixture
def intrinsics():
    return CameraIntrinsics(300.0, 300.0, 173.0, 130.0, k1=-0.1, k2=0.01, p1=0.0005, p2=-0.0003)


@pytest.fixture
def camera_pose():
    """Camera-to-world pose looking at the board from 0.6 m"""
    return Pose(Rotation.exp([0.1, -0.15, 0.05]), np.array([0.22, 0.08, -0.6]))


def observe(board, intrinsics, camera_pose, t=0.0, noise=0.0, seed=0):
    world = board.object_points()
    pixels = project_points(camera_pose.inverse().apply(world), intrinsics)
    pixels = pixels + np.random.default_rng(seed).normal(0.0, noise, pixels.shape)
    return GridPattern.from_board(t, np.arange(board.circle_count), pixels, board)


def smooth_pose(t):
    rotation = Rotation.exp([0.3 * np.sin(t), 0.2 * np.cos(1.3 * t), 0.4 * np.sin(0.7 * t)])
    return Pose(rotation, np.array([0.1 * np.sin(t), 0.2 * np.cos(t), 0.5 + 0.05 * t]))


def pose_run(times):
    return [TimedPose(smooth_pose(t), float(t), k) for k, t in enumerate(times)]


def excited_segment(constant_rotation=False):
    """Reference trajectory on [0.05, 3.4) rotating about every axis"""
    count = 70
    m = np.arange(count)
    if constant_rotation:
        rotations = [Rotation.identity()] * count
    else:
        rotations = [
            Rotation.exp(0.6 * np.array([np.sin(0.7 * k), np.cos(0.5 * k), np.sin(0.3 * k + 1.0)]))
            for k in m
        ]
    positions = 0.3 * np.column_stack([np.sin(0.4 * m), np.cos(0.6 * m), np.sin(0.2 * m)])
    return PiecewiseTrajectory((make_segment(0.0, 0.05, rotations, positions),))


def target_observations(trajectory, extrinsic, offset, times):
    """Target poses T_w_ct(t) = T_w_cr(t + offset) * X"""
    return [
        TimedPose(eval_pose(trajectory, t + offset) @ extrinsic, float(t), k)
        for k, t in enumerate(times)
    ]


class TestPnP:
    """Test cases for planar PnP"""

    def test_homography_recovery(self):
        """Test the normalized DLT recovers an exact homography"""
        h = np.array([[1.2, 0.1, 3.0], [-0.2, 0.9, 1.0], [0.001, 0.002, 1.0]])
        src = np.random.default_rng(1).uniform(-5.0, 5.0, (12, 2))
        mapped = np.c_[src, np.ones(12)] @ h.T
        dst = mapped[:, :2] / mapped[:, 2:]
        np.testing.assert_allclose(fit_homography(src, dst), h, atol=1e-9)

    def test_noiseless_pose(self, board, intrinsics, camera_pose):
        """Test exact observations give the exact pose through distortion"""
        solution = solve_pnp(observe(board, intrinsics, camera_pose), intrinsics)
        assert solution.rms < 1e-8
        np.testing.assert_allclose(solution.pose.translation, camera_pose.translation, atol=1e-8)
        assert solution.pose.rotation.angle_to(camera_pose.rotation) < 1e-8

    def test_noisy_pose(self, board, intrinsics, camera_pose):
        """Test half-pixel noise keeps the pose within a few millimeters"""
        solution = solve_pnp(observe(board, intrinsics, camera_pose, noise=0.5), intrinsics)
        assert 0.2 < solution.rms < 1.0
        assert np.linalg.norm(solution.pose.translation - camera_pose.translation) < 1e-2

    def test_too_few_points(self, board, intrinsics, camera_pose):
        """Test fewer than four points are degenerate"""
        full = observe(board, intrinsics, camera_pose)
        pattern = GridPattern.from_board(0.0, [0, 1, 2], full.image_points[:3], board)
        with pytest.raises(DegeneratePatternError):
            solve_pnp(pattern, intrinsics)

    def test_collinear_points(self, board, intrinsics, camera_pose):
        """Test points on one board column are degenerate"""
        full = observe(board, intrinsics, camera_pose)
        column = [0, 9, 18, 27]
        pattern = GridPattern.from_board(0.0, column, full.image_points[column], board)
        with pytest.raises(DegeneratePatternError):
            solve_pnp(pattern, intrinsics)

    def test_rms_limit(self, board, intrinsics, camera_pose):
        """Test a fit worse than max_rms fails"""
        with pytest.raises(PnPFailureError):
            solve_pnp(observe(board, intrinsics, camera_pose, noise=1.0), intrinsics, max_rms=1e-3)

    def test_estimate_poses_counts_failures(self, board, intrinsics, camera_pose):
        """Test failed patterns are counted and short ones skipped"""
        good = observe(board, intrinsics, camera_pose, t=0.0)
        short = GridPattern.from_board(0.01, [0, 1, 2], good.image_points[:3], board)
        bad = observe(board, intrinsics, camera_pose, t=0.02, noise=40.0, seed=4)
        track = PatternTrack("cam", [good, short, bad])

        poses, failures = estimate_poses(track, intrinsics)
        assert [p.timestamp for p in poses] == [0.0]
        assert poses[0].pattern_id == 0
        assert failures == 1

    def test_estimate_poses_complete_only(self, board, intrinsics, camera_pose):
        """Test incomplete patterns can be left out"""
        good = observe(board, intrinsics, camera_pose, t=0.0)
        partial = GridPattern.from_board(0.01, np.arange(20), good.image_points[:20], board)
        track = PatternTrack("cam", [good, partial])
        assert len(estimate_poses(track, intrinsics)[0]) == 2
        assert len(estimate_poses(track, intrinsics, complete_only=True)[0]) == 1


class TestSegmentation:
    """Test cases for splitting pose streams into runs"""

    def test_gap_splits_runs(self):
        """Test a gap of dt_thd or more starts a new run"""
        times = np.r_[np.arange(60) * 0.01, 1.0 + np.arange(70) * 0.01]
        runs = segment_poses(pose_run(times), dt_thd=0.1, n_thd=50)
        assert [len(run) for run in runs] == [60, 70]

    def test_short_runs_dropped(self):
        """Test runs of n_thd poses or fewer are discarded"""
        times = np.r_[np.arange(50) * 0.01, 1.0 + np.arange(51) * 0.01]
        runs = segment_poses(pose_run(times), dt_thd=0.1, n_thd=50)
        assert [len(run) for run in runs] == [51]

    def test_empty(self):
        """Test no poses give no runs"""
        assert segment_poses([]) == []


class TestSplineFit:
    """Test cases for fitting spline segments to pose runs"""

    def test_fit_accuracy(self):
        """Test a smooth motion is reproduced by the fitted segment"""
        run = pose_run(np.arange(201) * 0.01)
        segment = fit_spline_segment(run, 0.05)
        summary = segment_summary(segment, run)
        assert summary.pose_count == 201
        assert summary.rms_rotation < 1e-5
        assert summary.rms_position < 1e-5
        assert segment.t_min == 0.0
        assert segment.t_max >= 2.0 - 1e-9

    def test_separate_position_spacing(self):
        """Test the position spline may use its own knot spacing"""
        run = pose_run(np.arange(201) * 0.01)
        segment = fit_spline_segment(run, 0.05, 0.1)
        assert segment.position_spline.knot_spacing == 0.1
        assert segment.rotation_spline.knot_spacing == 0.05

    def test_short_span(self):
        """Test a run shorter than four knot intervals cannot be fitted"""
        with pytest.raises(InsufficientSpanError):
            fit_spline_segment(pose_run(np.arange(16) * 0.01), 0.05)

    def test_fit_residual_gauge_invariant(self):
        """Test a rigid change of world frame leaves the fit residual unchanged"""
        run = pose_run(np.arange(201) * 0.01)
        gauge = Pose(Rotation.exp([0.7, -0.4, 1.9]), np.array([2.0, -1.0, 0.5]))
        moved = [TimedPose(gauge @ p.pose, p.timestamp, p.pattern_id) for p in run]
        original = segment_summary(fit_spline_segment(run, 0.05), run)
        transformed = segment_summary(fit_spline_segment(moved, 0.05), moved)
        assert transformed.rms_rotation == pytest.approx(original.rms_rotation, abs=1e-9)
        assert transformed.rms_position == pytest.approx(original.rms_position, abs=1e-9)

    def test_build_trajectory(self):
        """Test one segment per long run, disjoint and time ordered"""
        steps = np.arange(101) * 0.01
        times = np.r_[steps, 1.5 + steps, 3.0 + steps[:20]]
        traj, summaries = build_trajectory(pose_run(times), n_thd=50)
        assert len(traj) == 2
        assert len(summaries) == 2
        assert traj.segments[0].t_max <= traj.segments[1].t_min
        pose = eval_pose(traj, 1.7)
        np.testing.assert_allclose(pose.translation, smooth_pose(1.7).translation, atol=1e-5)


class TestHandEye:
    """Test cases for the spatiotemporal hand-eye initialization"""

    def test_closed_form_exact(self):
        """Test A X = X B is solved exactly from consistent motions"""
        rng = np.random.default_rng(5)
        x = Pose(Rotation.exp([0.2, -0.1, 0.3]), np.array([0.12, -0.01, 0.02]))
        a = [Pose(Rotation.exp(rng.normal(size=3)), rng.normal(size=3)) for _ in range(8)]
        b = [x.inverse() @ motion @ x for motion in a]
        rot_x, trans_x, ratio = hand_eye_closed_form(
            np.array([m.rotation.matrix() for m in a]),
            np.array([m.translation for m in a]),
            np.array([m.rotation.matrix() for m in b]),
            np.array([m.translation for m in b]),
        )
        np.testing.assert_allclose(rot_x, x.rotation.matrix(), atol=1e-10)
        np.testing.assert_allclose(trans_x, x.translation, atol=1e-10)
        assert ratio > 1e-3

    def test_recovers_extrinsics_and_offset(self):
        """Test the grid search and refinement recover a known calibration"""
        trajectory = excited_segment()
        extrinsic = Pose(Rotation.exp([0.01, -0.005, 0.003]), np.array([0.12, 0.0, 0.0]))
        poses = target_observations(trajectory, extrinsic, 0.02, np.arange(0.3, 3.0, 0.01))

        with patch("src.stereo_calib.initialization.logger"):
            params = hand_eye_init(trajectory, poses, offset_bound=0.05, grid_step=0.001)

        assert params.time_offset == pytest.approx(0.02, abs=1e-6)
        np.testing.assert_allclose(params.translation, extrinsic.translation, atol=1e-6)
        assert params.rotation.angle_to(extrinsic.rotation) < 1e-6

    def test_equivariant_to_target_transform(self):
        """Test moving every target pose by a fixed transform moves the extrinsic by it"""
        trajectory = excited_segment()
        extrinsic = Pose(Rotation.exp([0.01, -0.005, 0.003]), np.array([0.12, 0.0, 0.0]))
        poses = target_observations(trajectory, extrinsic, 0.02, np.arange(0.3, 3.0, 0.01))
        change = Pose(Rotation.exp([0.05, 0.1, -0.02]), np.array([0.01, -0.03, 0.02]))
        moved = [TimedPose(p.pose @ change, p.timestamp, p.pattern_id) for p in poses]

        with patch("src.stereo_calib.initialization.logger"):
            base = hand_eye_init(trajectory, poses, offset_bound=0.05)
            shifted = hand_eye_init(trajectory, moved, offset_bound=0.05)

        expected = base.extrinsic @ change
        assert shifted.rotation.angle_to(expected.rotation) < 1e-6
        np.testing.assert_allclose(shifted.translation, expected.translation, atol=1e-6)
        assert shifted.time_offset == pytest.approx(base.time_offset, abs=1e-6)

    def test_offset_follows_target_clock(self):
        """Test setting the target clock back by d raises the recovered offset by d"""
        trajectory = excited_segment()
        extrinsic = Pose(Rotation.exp([0.01, -0.005, 0.003]), np.array([0.12, 0.0, 0.0]))
        poses = target_observations(trajectory, extrinsic, 0.02, np.arange(0.3, 3.0, 0.01))
        set_back = [TimedPose(p.pose, p.timestamp - 0.015, p.pattern_id) for p in poses]

        with patch("src.stereo_calib.initialization.logger"):
            base = hand_eye_init(trajectory, poses, offset_bound=0.05)
            later = hand_eye_init(trajectory, set_back, offset_bound=0.05)

        assert later.time_offset - base.time_offset == pytest.approx(0.015, abs=1e-4)

    def test_summary(self):
        """Test the initializer reports its pair count and costs"""
        trajectory = excited_segment()
        extrinsic = Pose(Rotation.identity(), np.array([0.1, 0.0, 0.0]))
        poses = target_observations(trajectory, extrinsic, -0.01, np.arange(0.3, 3.0, 0.01))

        with patch("src.stereo_calib.initialization.logger"):
            initializer = HandEyeInitializer(trajectory, poses, offset_bound=0.05)
            _, summary, report = initializer.run()

        assert summary.pair_count == len(poses) - 1
        assert summary.seed_offset == pytest.approx(-0.01, abs=1e-3)
        assert summary.refined_cost <= summary.seed_cost
        assert report.final_cost == summary.refined_cost

    def test_insufficient_overlap(self):
        """Test too few pose pairs on the reference trajectory"""
        trajectory = excited_segment()
        extrinsic = Pose(Rotation.identity(), np.zeros(3))
        poses = target_observations(trajectory, extrinsic, 0.0, np.arange(0.3, 0.35, 0.01))
        with pytest.raises(InsufficientOverlapError):
            HandEyeInitializer(trajectory, poses, offset_bound=0.05)

    def test_poor_rotation_excitation_warns(self):
        """Test a trajectory without rotation triggers the conditioning warning"""
        trajectory = excited_segment(constant_rotation=True)
        extrinsic = Pose(Rotation.exp([0.0, 0.0, 0.1]), np.array([0.1, 0.0, 0.0]))
        poses = target_observations(trajectory, extrinsic, 0.0, np.arange(0.3, 3.0, 0.01))

        with patch("src.stereo_calib.initialization.logger") as mock_logger:
            _, summary, _ = HandEyeInitializer(trajectory, poses, offset_bound=0.05).run()

        assert summary.conditioning_ratio < 1e-3
        mock_logger.log_warning.assert_called_once()
