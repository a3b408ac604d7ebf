"""
Data models for the stereo spatiotemporal calibrator
"""

import bisect
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, ClassVar, Dict, Iterator, List, Optional, Tuple

import numpy as np
from scipy.spatial.transform import Rotation as ScipyRotation

from .errors import InvalidArgumentError
from .geometry import CameraIntrinsics, Pose, Rotation

if TYPE_CHECKING:
    from .config import Configuration
    from .solver import SolverReport
    from .spline import PiecewiseTrajectory


@dataclass(frozen=True)
class BoardSpec:
    """Asymmetric circle grid; spacing is the center-to-center distance in meters"""

    rows: int
    cols: int
    spacing: float
    layout: str = "asymmetric"

    PRESETS: ClassVar[Dict[str, Tuple[int, int]]] = {
        "3x7": (3, 7),
        "4x9": (4, 9),
        "4x11": (4, 11),
    }

    def __post_init__(self) -> None:
        if self.rows < 2 or self.cols < 2:
            raise InvalidArgumentError(
                f"board needs at least 2x2 circles, got {self.rows}x{self.cols}"
            )
        if not self.spacing > 0:
            raise InvalidArgumentError(f"board spacing must be positive, got {self.spacing}")
        if self.layout != "asymmetric":
            raise InvalidArgumentError(
                f"only asymmetric circle grids are supported, got '{self.layout}'"
            )

    @classmethod
    def preset(cls, name: str, spacing: float = 0.05) -> "BoardSpec":
        if name not in cls.PRESETS:
            raise InvalidArgumentError(
                f"unknown board preset '{name}', expected one of {sorted(cls.PRESETS)}"
            )
        rows, cols = cls.PRESETS[name]
        return cls(rows, cols, spacing)

    @property
    def circle_count(self) -> int:
        return self.rows * self.cols

    @property
    def default_min_points(self) -> int:
        return max(5, math.ceil(0.3 * self.circle_count))

    def object_points(self) -> np.ndarray:
        """Board-frame circle centers (N, 3), row-major index j = r * cols + c"""
        r, c = np.divmod(np.arange(self.circle_count), self.cols)
        x = c * self.spacing
        y = (2 * r + c % 2) * self.spacing / 2.0
        return np.stack([x, y, np.zeros_like(x, dtype=float)], axis=-1).astype(float)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "rows": self.rows,
            "cols": self.cols,
            "spacing": self.spacing,
            "layout": self.layout,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "BoardSpec":
        return cls(
            int(data["rows"]),
            int(data["cols"]),
            float(data["spacing"]),
            data.get("layout", "asymmetric"),
        )


@dataclass(frozen=True)
class EllipseDetection:
    """One fitted ellipse center"""

    center: Tuple[float, float]
    timestamp: float


@dataclass(frozen=True, eq=False)
class EllipseFrame:
    """All ellipse centers detected at one timestamp, shape (M, 2)"""

    timestamp: float
    centers: np.ndarray

    def __post_init__(self) -> None:
        centers = np.array(self.centers, dtype=float).reshape(-1, 2)
        if not np.all(np.isfinite(centers)):
            raise InvalidArgumentError(f"non-finite ellipse center at t={self.timestamp}")
        centers.setflags(write=False)
        object.__setattr__(self, "centers", centers)

    @property
    def detections(self) -> List[EllipseDetection]:
        return [EllipseDetection((float(x), float(y)), self.timestamp) for x, y in self.centers]


@dataclass(frozen=True)
class PatternPoint:
    """Circle index with its image center (pixels) and board point (meters)"""

    circle_index: int
    image_point: Tuple[float, float]
    board_point: Tuple[float, float, float]


@dataclass(frozen=True, eq=False)
class GridPattern:
    """Timestamped 2D-3D correspondences of one board observation"""

    timestamp: float
    circle_indices: np.ndarray
    image_points: np.ndarray
    board_points: np.ndarray
    complete: bool

    def __post_init__(self) -> None:
        indices = np.array(self.circle_indices, dtype=int).reshape(-1)
        image = np.array(self.image_points, dtype=float).reshape(-1, 2)
        board = np.array(self.board_points, dtype=float).reshape(-1, 3)
        if not len(indices) == len(image) == len(board):
            raise InvalidArgumentError("pattern arrays must have the same length")
        if len(np.unique(indices)) != len(indices):
            raise InvalidArgumentError(f"duplicate circle index in pattern at t={self.timestamp}")
        for array in (indices, image, board):
            array.setflags(write=False)
        object.__setattr__(self, "circle_indices", indices)
        object.__setattr__(self, "image_points", image)
        object.__setattr__(self, "board_points", board)

    @classmethod
    def from_board(
        cls,
        timestamp: float,
        circle_indices: Any,
        image_points: Any,
        board: BoardSpec,
        object_points: Optional[np.ndarray] = None,
    ) -> "GridPattern":
        """Pattern whose board points and completeness follow from the board layout"""
        indices = np.array(circle_indices, dtype=int).reshape(-1)
        if np.any(indices < 0) or np.any(indices >= board.circle_count):
            raise InvalidArgumentError(
                f"circle index out of range for a {board.rows}x{board.cols} board at t={timestamp}"
            )
        if object_points is None:
            object_points = board.object_points()
        order = np.argsort(indices, kind="stable")
        return cls(
            float(timestamp),
            indices[order],
            np.asarray(image_points, dtype=float).reshape(-1, 2)[order],
            object_points[indices[order]],
            len(indices) == board.circle_count,
        )

    def __len__(self) -> int:
        return len(self.circle_indices)

    @property
    def points(self) -> List[PatternPoint]:
        return [
            PatternPoint(int(j), (float(x[0]), float(x[1])), tuple(float(v) for v in p))
            for j, x, p in zip(self.circle_indices, self.image_points, self.board_points)
        ]

    def image_point(self, circle_index: int) -> Optional[np.ndarray]:
        pos = np.searchsorted(self.circle_indices, circle_index)
        if pos < len(self.circle_indices) and self.circle_indices[pos] == circle_index:
            return self.image_points[pos]
        return None


@dataclass
class PatternTrack:
    """Time-ordered patterns of one camera"""

    camera_id: str
    patterns: List[GridPattern] = field(default_factory=list)

    def __post_init__(self) -> None:
        times = [p.timestamp for p in self.patterns]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise InvalidArgumentError(
                f"pattern timestamps of camera '{self.camera_id}' must be strictly increasing"
            )
        object.__setattr__(self, "_times", times)

    def __len__(self) -> int:
        return len(self.patterns)

    def __iter__(self) -> Iterator[GridPattern]:
        return iter(self.patterns)

    def __getitem__(self, index: int) -> GridPattern:
        return self.patterns[index]

    @property
    def timestamps(self) -> List[float]:
        return list(self._times)

    def copy(self) -> "PatternTrack":
        return PatternTrack(self.camera_id, list(self.patterns))

    def insert(self, pattern: GridPattern) -> int:
        """Insert keeping time order; returns the new position"""
        pos = bisect.bisect_left(self._times, pattern.timestamp)
        if pos < len(self._times) and self._times[pos] == pattern.timestamp:
            raise InvalidArgumentError(
                f"camera '{self.camera_id}' already has a pattern at t={pattern.timestamp}"
            )
        self._times.insert(pos, pattern.timestamp)
        self.patterns.insert(pos, pattern)
        return pos

    def history(self) -> Dict[int, List[int]]:
        """Per-circle list of the pattern positions that observe it"""
        index: Dict[int, List[int]] = {}
        for pos, pattern in enumerate(self.patterns):
            for j in pattern.circle_indices:
                index.setdefault(int(j), []).append(pos)
        return index

    @property
    def complete_count(self) -> int:
        return sum(1 for p in self.patterns if p.complete)

    @property
    def incomplete_count(self) -> int:
        return len(self.patterns) - self.complete_count


@dataclass(frozen=True)
class TimedPose:
    """Camera-to-world pose recovered from one pattern"""

    pose: Pose
    timestamp: float
    pattern_id: int
    rms: float = 0.0


@dataclass(frozen=True)
class SpatiotemporalParams:
    """Target camera w.r.t. the reference camera.

    x_ref = rotation * x_target + translation and t_ref = t_target + time_offset.
    """

    rotation: Rotation
    translation: np.ndarray
    time_offset: float

    def __post_init__(self) -> None:
        t = np.array(self.translation, dtype=float).reshape(3)
        t.setflags(write=False)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "SpatiotemporalParams":
        return cls(Rotation.identity(), np.zeros(3), 0.0)

    @property
    def extrinsic(self) -> Pose:
        return Pose(self.rotation, self.translation)

    def euler_degrees(self) -> np.ndarray:
        """Intrinsic X-Y-Z Euler angles for display"""
        return euler_xyz_degrees(self.rotation)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "rotation_quaternion_wxyz": self.rotation.quaternion.tolist(),
            "rotation_euler_xyz_deg": self.euler_degrees().tolist(),
            "translation_m": self.translation.tolist(),
            "time_offset_s": self.time_offset,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SpatiotemporalParams":
        return cls(
            Rotation(np.array(data["rotation_quaternion_wxyz"], dtype=float)),
            np.array(data["translation_m"], dtype=float),
            float(data["time_offset_s"]),
        )


def euler_xyz_degrees(rotation: Rotation) -> np.ndarray:
    w, x, y, z = rotation.quaternion
    return ScipyRotation.from_quat([x, y, z, w]).as_euler("XYZ", degrees=True)


@dataclass
class TrackingStats:
    """Complete and incomplete tracking rates over the ellipse frames of one camera"""

    camera_id: str
    frame_count: int
    complete: int
    incomplete: int

    @property
    def total(self) -> int:
        return self.complete + self.incomplete

    def _rate(self, count: int) -> float:
        return count / self.frame_count if self.frame_count else 0.0

    @property
    def complete_rate(self) -> float:
        return self._rate(self.complete)

    @property
    def incomplete_rate(self) -> float:
        return self._rate(self.incomplete)

    @property
    def total_rate(self) -> float:
        return self._rate(self.total)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "frames": self.frame_count,
            "complete": self.complete,
            "incomplete": self.incomplete,
            "complete_rate": self.complete_rate,
            "incomplete_rate": self.incomplete_rate,
            "total_rate": self.total_rate,
        }


@dataclass
class ResidualStats:
    """Post-fit reprojection error distribution of one camera"""

    camera_id: str
    count: int
    excluded: int
    mean: np.ndarray
    sigma: np.ndarray
    rms: float
    histogram: np.ndarray
    bin_edges: np.ndarray

    @property
    def bin_centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[:-1] + self.bin_edges[1:])

    def to_dict(self) -> Dict[str, Any]:
        return {
            "count": self.count,
            "excluded": self.excluded,
            "mean_px": self.mean.tolist(),
            "sigma_px": self.sigma.tolist(),
            "rms_px": self.rms,
        }


@dataclass
class SegmentSummary:
    """Span and fit quality of one trajectory segment"""

    t_min: float
    t_max: float
    pose_count: int
    rms_rotation: float
    rms_position: float

    def to_dict(self) -> Dict[str, Any]:
        return {
            "t_min": self.t_min,
            "t_max": self.t_max,
            "poses": self.pose_count,
            "rms_rotation_rad": self.rms_rotation,
            "rms_position_m": self.rms_position,
        }


@dataclass
class HandEyeSummary:
    """Grid-search and refinement figures of the hand-eye stage"""

    pair_count: int
    seed_offset: float
    seed_cost: float
    refined_cost: float
    conditioning_ratio: float

    def to_dict(self) -> Dict[str, Any]:
        return {
            "pairs": self.pair_count,
            "seed_offset_s": self.seed_offset,
            "seed_cost": self.seed_cost,
            "refined_cost": self.refined_cost,
            "conditioning_ratio": self.conditioning_ratio,
        }


@dataclass
class CameraData:
    """Per-camera calibration input"""

    camera_id: str
    intrinsics: CameraIntrinsics
    complete_track: PatternTrack
    ellipse_frames: List[EllipseFrame] = field(default_factory=list)


@dataclass
class CalibrationInput:
    """Two cameras observing the same board"""

    cameras: List[CameraData]
    board: BoardSpec
    config: Optional["Configuration"] = None
    scenario_id: Optional[str] = None


@dataclass
class CalibrationResult:
    """Everything the pipeline recovers, plus its diagnostics"""

    params: SpatiotemporalParams
    trajectory: "PiecewiseTrajectory"
    reference_camera: str
    target_camera: str
    residual_stats: Dict[str, ResidualStats]
    solver_reports: Dict[str, "SolverReport"]
    tracking_stats: Dict[str, TrackingStats]
    segments: List[SegmentSummary] = field(default_factory=list)
    hand_eye: Optional[HandEyeSummary] = None
    pnp_failures: Dict[str, int] = field(default_factory=dict)
    timings: Dict[str, float] = field(default_factory=dict)
    scenario_id: Optional[str] = None
