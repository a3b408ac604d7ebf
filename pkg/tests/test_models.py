"""
Tests for data models (dataclasses)
"""

import numpy as np
import pytest
from src.stereo_calib.errors import InvalidArgumentError
from src.stereo_calib.geometry import Rotation
from src.stereo_calib.models import (
    BoardSpec,
    EllipseFrame,
    GridPattern,
    PatternTrack,
    ResidualStats,
    SpatiotemporalParams,
    TrackingStats,
)


@pytest.fixture
def board():
    return BoardSpec.preset("3x7")


def pattern(board, t, indices=None):
    if indices is None:
        indices = np.arange(board.circle_count)
    points = np.column_stack([indices * 10.0, indices * 5.0 + t])
    return GridPattern.from_board(t, indices, points, board)


class TestBoardSpec:
    """Test cases for BoardSpec dataclass"""

    def test_presets(self):
        """Test the named board layouts"""
        assert BoardSpec.preset("3x7").circle_count == 21
        assert BoardSpec.preset("4x9").circle_count == 36
        assert BoardSpec.preset("4x11", spacing=0.02).spacing == 0.02

    def test_unknown_preset(self):
        """Test unknown preset names"""
        with pytest.raises(InvalidArgumentError, match="5x5"):
            BoardSpec.preset("5x5")

    def test_asymmetric_layout(self, board):
        """Test odd columns are shifted by half a row"""
        points = board.object_points()
        assert points.shape == (21, 3)
        np.testing.assert_allclose(points[0], [0.0, 0.0, 0.0])
        np.testing.assert_allclose(points[1], [0.05, 0.025, 0.0])
        np.testing.assert_allclose(points[7], [0.0, 0.05, 0.0])
        assert np.all(points[:, 2] == 0.0)

    def test_invalid_boards(self):
        """Test size, spacing and layout checks"""
        with pytest.raises(InvalidArgumentError):
            BoardSpec(1, 7, 0.05)
        with pytest.raises(InvalidArgumentError):
            BoardSpec(3, 7, 0.0)
        with pytest.raises(InvalidArgumentError):
            BoardSpec(3, 7, 0.05, "symmetric")

    def test_dict_roundtrip(self, board):
        """Test the board survives serialization"""
        assert BoardSpec.from_dict(board.to_dict()) == board


class TestGridPattern:
    """Test cases for GridPattern dataclass"""

    def test_from_board_sorts_indices(self, board):
        """Test points are reordered by circle index with their board points"""
        p = GridPattern.from_board(0.5, [4, 1, 2], [[4.0, 0.0], [1.0, 0.0], [2.0, 0.0]], board)
        np.testing.assert_array_equal(p.circle_indices, [1, 2, 4])
        np.testing.assert_array_equal(p.image_points[:, 0], [1.0, 2.0, 4.0])
        np.testing.assert_allclose(p.board_points, board.object_points()[[1, 2, 4]])
        assert not p.complete
        assert len(p) == 3

    def test_complete_pattern(self, board):
        """Test a pattern with every circle is complete"""
        assert pattern(board, 0.0).complete

    def test_index_out_of_range(self, board):
        """Test circle indices must exist on the board"""
        with pytest.raises(InvalidArgumentError):
            GridPattern.from_board(0.0, [21], [[0.0, 0.0]], board)

    def test_duplicate_index(self, board):
        """Test a circle appears at most once"""
        with pytest.raises(InvalidArgumentError, match="duplicate"):
            GridPattern.from_board(0.0, [3, 3], [[0.0, 0.0], [1.0, 1.0]], board)

    def test_image_point_lookup(self, board):
        """Test lookup by circle index"""
        p = pattern(board, 0.0, np.array([2, 5, 9]))
        np.testing.assert_allclose(p.image_point(5), [50.0, 25.0])
        assert p.image_point(6) is None

    def test_read_only(self, board):
        """Test pattern arrays cannot be modified in place"""
        p = pattern(board, 0.0)
        with pytest.raises(ValueError):
            p.image_points[0, 0] = 1.0


class TestPatternTrack:
    """Test cases for PatternTrack"""

    def test_requires_increasing_times(self, board):
        """Test patterns must be strictly time ordered"""
        with pytest.raises(InvalidArgumentError):
            PatternTrack("cam", [pattern(board, 0.1), pattern(board, 0.1)])

    def test_insert_keeps_order(self, board):
        """Test insertion finds the time-ordered position"""
        track = PatternTrack("cam", [pattern(board, 0.0), pattern(board, 0.2)])
        assert track.insert(pattern(board, 0.1, np.arange(10))) == 1
        assert track.timestamps == [0.0, 0.1, 0.2]
        assert track.complete_count == 2
        assert track.incomplete_count == 1

    def test_insert_duplicate_time(self, board):
        """Test one pattern per timestamp"""
        track = PatternTrack("cam", [pattern(board, 0.0)])
        with pytest.raises(InvalidArgumentError):
            track.insert(pattern(board, 0.0))

    def test_history(self, board):
        """Test per-circle observation history"""
        track = PatternTrack(
            "cam", [pattern(board, 0.0, np.array([0, 1])), pattern(board, 0.1, np.array([1]))]
        )
        assert track.history() == {0: [0], 1: [0, 1]}

    def test_copy_is_independent(self, board):
        """Test inserting into a copy leaves the original alone"""
        track = PatternTrack("cam", [pattern(board, 0.0)])
        copy = track.copy()
        copy.insert(pattern(board, 0.1))
        assert len(track) == 1
        assert len(copy) == 2


class TestEllipseFrame:
    """Test cases for EllipseFrame"""

    def test_detections(self):
        """Test centers are exposed as detections"""
        frame = EllipseFrame(0.3, [[1.0, 2.0], [3.0, 4.0]])
        assert frame.centers.shape == (2, 2)
        assert frame.detections[1].center == (3.0, 4.0)
        assert frame.detections[0].timestamp == 0.3

    def test_non_finite(self):
        """Test NaN centers are rejected"""
        with pytest.raises(InvalidArgumentError):
            EllipseFrame(0.0, [[np.nan, 1.0]])


class TestSpatiotemporalParams:
    """Test cases for SpatiotemporalParams"""

    def test_identity(self):
        """Test the identity parameters"""
        params = SpatiotemporalParams.identity()
        np.testing.assert_allclose(params.translation, 0.0)
        assert params.time_offset == 0.0
        np.testing.assert_allclose(params.euler_degrees(), 0.0, atol=1e-12)

    def test_euler_single_axis(self):
        """Test a rotation about z shows up as the third Euler angle"""
        params = SpatiotemporalParams(Rotation.exp([0.0, 0.0, np.deg2rad(30.0)]), np.zeros(3), 0.0)
        np.testing.assert_allclose(params.euler_degrees(), [0.0, 0.0, 30.0], atol=1e-9)

    def test_dict_roundtrip(self):
        """Test the parameters survive serialization"""
        params = SpatiotemporalParams(Rotation.exp([0.1, 0.2, -0.3]), [0.1, 0.0, 0.02], -0.004)
        data = params.to_dict()
        assert set(data) == {
            "rotation_quaternion_wxyz",
            "rotation_euler_xyz_deg",
            "translation_m",
            "time_offset_s",
        }
        loaded = SpatiotemporalParams.from_dict(data)
        assert loaded.rotation.angle_to(params.rotation) < 1e-12
        np.testing.assert_array_equal(loaded.translation, params.translation)
        assert loaded.time_offset == -0.004

    def test_extrinsic(self):
        """Test the extrinsic pose maps target points into the reference frame"""
        params = SpatiotemporalParams(Rotation.identity(), [0.12, 0.0, 0.0], 0.0)
        np.testing.assert_allclose(params.extrinsic.apply(np.zeros(3)), [0.12, 0.0, 0.0])


class TestStats:
    """Test cases for tracking and residual statistics"""

    def test_tracking_rates(self):
        """Test rates over the frame count"""
        stats = TrackingStats("cam", 200, 150, 30)
        assert stats.total == 180
        assert stats.complete_rate == 0.75
        assert stats.incomplete_rate == 0.15
        assert stats.total_rate == 0.9
        assert stats.to_dict()["incomplete"] == 30

    def test_tracking_rates_without_frames(self):
        """Test rates are zero when no frames were seen"""
        assert TrackingStats("cam", 0, 0, 0).total_rate == 0.0

    def test_bin_centers(self):
        """Test histogram bin centers sit between the edges"""
        edges = np.linspace(-0.5, 0.5, 51)
        stats = ResidualStats(
            "cam", 0, 0, np.zeros(2), np.zeros(2), 0.0, np.zeros((50, 50), int), edges
        )
        assert len(stats.bin_centers) == 50
        assert stats.bin_centers[0] == pytest.approx(-0.49)
        assert stats.to_dict()["rms_px"] == 0.0
