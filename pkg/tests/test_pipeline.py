"""
Tests for bundle adjustment and the end-to-end calibration pipeline
"""

from dataclasses import replace

import numpy as np
import pytest
from src.stereo_calib.config import Configuration
from src.stereo_calib.errors import (
    InsufficientCoverageError,
    InsufficientDataError,
    InvalidArgumentError,
    StageError,
)
from src.stereo_calib.geometry import (
    Pose,
    Rotation,
    project_points,
    projection_jacobian,
    quat_multiply,
)
from src.stereo_calib.models import CalibrationInput, GridPattern, PatternTrack
from src.stereo_calib.pipeline import (
    StereoCalibrator,
    build_ba_problem,
    compute_residual_stats,
    run_calibration,
)
from src.stereo_calib.simulator import ScenarioSpec, TrajectoryRecipe, evaluate, generate
from src.stereo_calib.solver import _block_jacobians, solve
from src.stereo_calib.spline import PiecewiseTrajectory, eval_pose

STAGES = ["tracking", "reference", "pnp", "trajectory", "hand_eye", "bundle_adjustment", "report"]


@pytest.fixture(scope="module")
def noisy_run():
    bundle = generate(ScenarioSpec(duration=5.0, seed=1))
    return bundle, run_calibration(bundle.to_calibration_input())


# Spline-sampled motion on the calibrator's knot grid, kept small so the board never leaves
# either view and the single trajectory segment starts on a knot
EXACT_MOTION = TrajectoryRecipe(
    position_amplitude=(0.05, 0.04, 0.03),
    rotation_amplitude_deg=(3.0, 3.0, 10.0),
    spline_knot_spacing=0.05,
)


@pytest.fixture(scope="module")
def noiseless_run():
    bundle = generate(ScenarioSpec(duration=4.0, noise_sigma=0.0, trajectory=EXACT_MOTION))
    config = Configuration(reference_camera="left")
    return bundle, run_calibration(bundle.to_calibration_input(config))


def tracks_and_intrinsics(bundle):
    tracks = {c.camera_id: c.complete_track for c in bundle.cameras}
    intrinsics = {c.camera_id: c.intrinsics for c in bundle.cameras}
    return tracks, intrinsics


def restamped(track, shift, count=3):
    patterns = [
        GridPattern(p.timestamp + shift, p.circle_indices, p.image_points, p.board_points, True)
        for p in track.patterns[:count]
    ]
    return PatternTrack(track.camera_id, patterns)


def single_pattern_problem(bundle, result):
    """Problem with one mid-recording pattern per camera, so each camera has one block"""
    tracks, intrinsics = tracks_and_intrinsics(bundle)
    middle = {
        cid: PatternTrack(cid, [track.patterns[len(track.patterns) // 2]])
        for cid, track in tracks.items()
    }
    ba = build_ba_problem(result.trajectory, result.params, middle, intrinsics, "left")
    blocks = {block.group: block for block in ba.problem.residuals}
    return ba, middle, intrinsics, blocks


def solver_jacobians(problem, block):
    params = [problem[pid] for pid in block.parameter_ids]
    args = [param.value.copy() for param in params]
    return _block_jacobians(block, params, args, block.function(*args))


def central_difference(problem, block, position, h=1e-6):
    params = [problem[pid] for pid in block.parameter_ids]
    args = [param.value.copy() for param in params]
    param = params[position]
    columns = []
    for k in range(param.tangent_dim):
        delta = np.zeros(param.tangent_dim)
        delta[k] = h
        plus, minus = list(args), list(args)
        plus[position] = param.plus(args[position], delta)
        minus[position] = param.plus(args[position], -delta)
        columns.append((block.function(*plus) - block.function(*minus)) / (2 * h))
    return np.column_stack(columns)


def chain(jac, d_cam):
    """Stacked pixel Jacobian (2N, k) from (N, 2, 3) projection and (3, k) point Jacobians"""
    return np.einsum("nij,jk->nik", jac, d_cam).reshape(-1, d_cam.shape[1])


def position_weight(spline, m, tau):
    unit = np.zeros((spline.count, 3))
    unit[m, 0] = 1.0
    return float(spline.with_control_points(unit).evaluate(tau)[0, 0])


class TestCalibrationPipeline:
    """Test cases for the full calibration on simulated recordings"""

    def test_noisy_accuracy(self, noisy_run):
        """Test extrinsics and offset are recovered from a noisy recording"""
        bundle, result = noisy_run
        metrics = evaluate(result, bundle)
        assert metrics.geodesic_deg < 0.1
        assert np.linalg.norm(metrics.translation_error_cm) < 0.5
        assert abs(metrics.offset_error_ms) < 1.0

    def test_noiseless_accuracy(self, noiseless_run):
        """Test a noiseless recording of spline motion is calibrated exactly"""
        bundle, result = noiseless_run
        metrics = evaluate(result, bundle)
        assert np.deg2rad(metrics.geodesic_deg) < 1e-6
        assert np.linalg.norm(metrics.translation_error_cm) / 100.0 < 1e-6
        assert abs(metrics.offset_error_ms) / 1000.0 < 1e-5
        assert len(result.segments) == 1
        for stats in result.residual_stats.values():
            assert stats.rms < 1e-8
        assert result.solver_reports["bundle_adjustment"].converged

    def test_solver_reports(self, noisy_run):
        """Test both solver stages report and bundle adjustment converges"""
        _, result = noisy_run
        assert set(result.solver_reports) == {"hand_eye", "bundle_adjustment"}
        report = result.solver_reports["bundle_adjustment"]
        assert report.converged
        assert report.final_cost <= report.initial_cost
        assert set(report.group_rms) == {result.reference_camera, result.target_camera}

    def test_residual_statistics(self, noisy_run):
        """Test per-camera residual moments and histogram"""
        _, result = noisy_run
        for camera, stats in result.residual_stats.items():
            assert stats.camera_id == camera
            assert stats.count > 0
            assert stats.histogram.shape == (50, 50)
            assert stats.histogram.sum() == stats.count
            assert np.all(np.abs(stats.mean) < 0.02)
            assert np.all((stats.sigma > 0.07) & (stats.sigma < 0.13))

    def test_diagnostics(self, noisy_run):
        """Test tracking rates, segments, timings and the scenario id are reported"""
        bundle, result = noisy_run
        assert {result.reference_camera, result.target_camera} == {"left", "right"}
        assert set(result.tracking_stats) == {"left", "right"}
        assert list(result.timings) == STAGES
        assert len(result.segments) == len(result.trajectory) >= 1
        assert result.hand_eye.pair_count > 10
        assert result.scenario_id == bundle.scenario_id
        assert set(result.pnp_failures) == {result.reference_camera, result.target_camera}

    def test_refined_trajectory_tracks_truth(self, noiseless_run):
        """Test the refined trajectory matches the true reference motion"""
        bundle, result = noiseless_run
        assert result.reference_camera == "left"
        taus = [tau for tau in (0.5, 1.7, 3.2) if result.trajectory.segment_index(tau) >= 0]
        assert taus
        for tau in taus:
            pose = eval_pose(result.trajectory, tau)
            truth = bundle.pose(tau)
            np.testing.assert_allclose(pose.translation, truth.translation, atol=1e-7)
            assert pose.rotation.angle_to(truth.rotation) < 1e-7

    @pytest.mark.slow
    def test_default_scenario(self):
        """Test the default thirty-second scenario meets the accuracy targets"""
        bundle = generate(ScenarioSpec())
        metrics = evaluate(run_calibration(bundle.to_calibration_input()), bundle)
        assert metrics.geodesic_deg < 0.05
        assert np.all(np.abs(metrics.translation_error_cm) < 0.2)
        assert abs(metrics.offset_error_ms) < 0.2


class TestBundleAdjustment:
    """Test cases for the reprojection problem"""

    def test_exclusion_counting(self, noiseless_run):
        """Test residual and exclusion counts add up to every observed point"""
        bundle, result = noiseless_run
        tracks, intrinsics = tracks_and_intrinsics(bundle)
        ba = build_ba_problem(
            result.trajectory, result.params, tracks, intrinsics, result.reference_camera
        )
        for camera, track in tracks.items():
            points = sum(len(p) for p in track)
            assert ba.residual_counts[camera] + ba.excluded[camera] == 2 * points
        assert ba.excluded[result.target_camera] > 0
        assert ba.excluded[result.target_camera] % 42 == 0

    def test_offset_recovered_from_perturbation(self, noiseless_run):
        """Test bundle adjustment pulls a perturbed offset back to the truth"""
        bundle, result = noiseless_run
        tracks, intrinsics = tracks_and_intrinsics(bundle)
        start = replace(result.params, time_offset=result.params.time_offset + 0.004)
        ba = build_ba_problem(result.trajectory, start, tracks, intrinsics, result.reference_camera)
        solve(ba.problem)
        refined = ba.params_state()
        assert refined.time_offset == pytest.approx(result.params.time_offset, abs=1e-7)
        stats = compute_residual_stats(ba)
        assert all(s.rms < 1e-6 for s in stats.values())

    def test_offset_box(self, noiseless_run):
        """Test the offset stays inside the window around its initial value"""
        bundle, result = noiseless_run
        tracks, intrinsics = tracks_and_intrinsics(bundle)
        start = replace(result.params, time_offset=result.params.time_offset + 0.004)
        reference = result.reference_camera
        ba = build_ba_problem(
            result.trajectory, start, tracks, intrinsics, reference, offset_window=0.001
        )
        block = ba.problem["time_offset"]
        assert block.lower[0] == pytest.approx(start.time_offset - 0.001)
        assert block.upper[0] == pytest.approx(start.time_offset + 0.001)

    def test_no_coverage(self, noiseless_run):
        """Test patterns all outside the trajectory leave nothing to adjust"""
        bundle, result = noiseless_run
        tracks, intrinsics = tracks_and_intrinsics(bundle)
        far = {cid: restamped(track, 100.0) for cid, track in tracks.items()}
        with pytest.raises(InsufficientCoverageError):
            build_ba_problem(result.trajectory, result.params, far, intrinsics, "left")

    def test_needs_two_tracks(self, noiseless_run):
        """Test the problem needs the reference and one target track"""
        bundle, result = noiseless_run
        tracks, intrinsics = tracks_and_intrinsics(bundle)
        with pytest.raises(InvalidArgumentError):
            build_ba_problem(result.trajectory, result.params, tracks, intrinsics, "middle")

    def test_reference_jacobian_matches_analytic(self, noiseless_run):
        """Test differenced reference-block columns against the chain rule and central steps"""
        bundle, result = noiseless_run
        ba, tracks, intrinsics, blocks = single_pattern_problem(bundle, result)
        block = blocks["left"]
        pattern = tracks["left"].patterns[0]
        tau = pattern.timestamp
        rotations, positions, covered = ba.trajectory.poses(np.array([tau]))
        assert covered.all()
        rot, pos = rotations[0], positions[0]
        jac = projection_jacobian((pattern.board_points - pos) @ rot, intrinsics["left"])
        numeric = solver_jacobians(ba.problem, block)
        for position, pid in enumerate(block.parameter_ids):
            if pid[0] == "pos":
                spline = ba.trajectory.segments[pid[1]].position_spline
                weight = position_weight(spline, pid[2], tau)
                expected = chain(jac, -rot.T * weight)
            else:
                expected = central_difference(ba.problem, block, position)
            np.testing.assert_allclose(numeric[position], expected, rtol=1e-4, atol=1e-3)

    def test_target_jacobian_matches_analytic(self, noiseless_run):
        """Test differenced target-block columns against the chain rule and central steps"""
        bundle, result = noiseless_run
        ba, tracks, intrinsics, blocks = single_pattern_problem(bundle, result)
        block = blocks["right"]
        pattern = tracks["right"].patterns[0]
        tau = pattern.timestamp + result.params.time_offset
        rotations, positions, covered = ba.trajectory.poses(np.array([tau]))
        assert covered.all()
        rot, pos = rotations[0], positions[0]
        rot_x = result.params.rotation.matrix()
        cam = ((pattern.board_points - pos) @ rot - result.params.translation) @ rot_x
        jac = projection_jacobian(cam, intrinsics["right"])
        numeric = solver_jacobians(ba.problem, block)
        for position, pid in enumerate(block.parameter_ids):
            if pid == "ext_trans":
                expected = chain(jac, -rot_x.T)
            elif isinstance(pid, tuple) and pid[0] == "pos":
                spline = ba.trajectory.segments[pid[1]].position_spline
                weight = position_weight(spline, pid[2], tau)
                expected = chain(jac, -rot_x.T @ rot.T * weight)
            else:
                expected = central_difference(ba.problem, block, position)
            np.testing.assert_allclose(numeric[position], expected, rtol=1e-4, atol=1e-3)

    def test_offset_moves_only_target_residuals(self, noiseless_run):
        """Test a time offset change leaves every reference residual bit-identical"""
        bundle, result = noiseless_run
        tracks, intrinsics = tracks_and_intrinsics(bundle)
        ba = build_ba_problem(result.trajectory, result.params, tracks, intrinsics, "left")
        _, before = ba.problem.evaluate()
        values = ba.problem.values()
        values["time_offset"] = values["time_offset"] + 0.002
        _, after = ba.problem.evaluate(values)
        for block, old, new in zip(ba.problem.residuals, before, after):
            if block.group == "left":
                assert np.array_equal(old, new)
            else:
                assert np.abs(new - old).max() > 1e-6

    def test_exclusion_safe_across_offset_box(self, noiseless_run):
        """Test every kept target pattern stays inside its segment anywhere in the offset box"""
        bundle, result = noiseless_run
        tracks, intrinsics = tracks_and_intrinsics(bundle)
        ba = build_ba_problem(result.trajectory, result.params, tracks, intrinsics, "left")
        block = ba.problem["time_offset"]
        lower, upper = block.lower[0], block.upper[0]
        kept = [
            p
            for p in tracks["right"]
            if ba.trajectory.covering_segment(p.timestamp + lower, p.timestamp + upper) >= 0
        ]
        assert 2 * sum(len(p) for p in kept) == ba.residual_counts["right"]
        rot_x = result.params.rotation.matrix()
        for offset in np.linspace(lower, upper, 5):
            values = ba.problem.values()
            values["time_offset"] = np.array([offset])
            _, residuals = ba.problem.evaluate(values)
            evaluated = np.concatenate(
                [r for b, r in zip(ba.problem.residuals, residuals) if b.group == "right"]
            )
            taus = np.array([p.timestamp for p in kept]) + offset
            rotations, positions, covered = ba.trajectory.poses(taus)
            assert covered.all()
            independent = []
            for p, rot, pos in zip(kept, rotations, positions):
                cam = ((p.board_points - pos) @ rot - result.params.translation) @ rot_x
                independent.append(project_points(cam, intrinsics["right"]) - p.image_points)
            np.testing.assert_allclose(
                np.sort(evaluated), np.sort(np.concatenate(independent).ravel()), atol=1e-9
            )

    def test_residual_stats_reproduce_final_cost(self, noisy_run):
        """Test the per-camera error statistics add up to the final solver cost"""
        _, result = noisy_run
        report = result.solver_reports["bundle_adjustment"]
        # 0.1 px noise keeps every error inside the 1 px Huber threshold
        total = sum(s.count * s.rms**2 for s in result.residual_stats.values())
        assert 0.5 * total == pytest.approx(report.final_cost, rel=1e-9)

    def test_cost_invariant_to_world_frame(self, noisy_run):
        """Test moving the world frame under board and trajectory keeps the cost"""
        bundle, result = noisy_run
        tracks, intrinsics = tracks_and_intrinsics(bundle)
        gauge = Pose(Rotation.exp([0.3, -0.2, 0.5]), np.array([1.0, -2.0, 0.5]))
        moved_traj = PiecewiseTrajectory(
            tuple(
                segment.with_control_points(
                    quat_multiply(
                        gauge.rotation.quaternion, segment.rotation_spline.control_points
                    ),
                    gauge.apply(segment.position_spline.control_points),
                )
                for segment in result.trajectory.segments
            )
        )
        moved_tracks = {
            cid: PatternTrack(
                cid,
                [
                    GridPattern(
                        p.timestamp,
                        p.circle_indices,
                        p.image_points,
                        gauge.apply(p.board_points),
                        p.complete,
                    )
                    for p in track
                ],
            )
            for cid, track in tracks.items()
        }
        reference = result.reference_camera
        ba = build_ba_problem(result.trajectory, result.params, tracks, intrinsics, reference)
        moved = build_ba_problem(moved_traj, result.params, moved_tracks, intrinsics, reference)
        assert moved.residual_counts == ba.residual_counts
        cost, _ = ba.problem.evaluate()
        moved_cost, _ = moved.problem.evaluate()
        assert moved_cost == pytest.approx(cost, rel=1e-9)


class TestStereoCalibrator:
    """Test cases for input checks and stage errors"""

    @pytest.fixture
    def bundle(self):
        return generate(ScenarioSpec(duration=1.0, seed=2))

    def test_single_camera(self, bundle):
        """Test exactly two cameras are required"""
        inp = CalibrationInput(bundle.cameras[:1], bundle.spec.board)
        with pytest.raises(InvalidArgumentError):
            run_calibration(inp)

    def test_duplicate_camera_ids(self, bundle):
        """Test the two cameras need distinct ids"""
        inp = CalibrationInput([bundle.cameras[0], bundle.cameras[0]], bundle.spec.board)
        with pytest.raises(InvalidArgumentError):
            run_calibration(inp)

    def test_unknown_reference_camera(self, bundle):
        """Test a forced reference must be one of the input cameras"""
        config = Configuration(reference_camera="middle")
        with pytest.raises(InvalidArgumentError, match="middle"):
            run_calibration(bundle.to_calibration_input(config))

    def test_camera_without_patterns(self, bundle):
        """Test each camera needs complete patterns"""
        empty = replace(bundle.cameras[1], complete_track=PatternTrack("right"))
        inp = CalibrationInput([bundle.cameras[0], empty], bundle.spec.board)
        with pytest.raises(InsufficientDataError):
            run_calibration(inp)

    def test_stage_error(self, bundle):
        """Test a failing stage is reported by name with its cause"""
        calibrator = StereoCalibrator(Configuration(n_thd=100000))
        with pytest.raises(StageError) as info:
            calibrator.run(bundle.to_calibration_input())
        assert info.value.stage == "trajectory"
        assert isinstance(info.value.cause, InsufficientDataError)
        assert "tracking" in calibrator.timings
