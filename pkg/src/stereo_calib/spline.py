"""
Cubic cumulative uniform B-splines over R^3 and SO(3), and the piecewise trajectory built
from them.

Control point ``m`` is attached to time ``start_time + m * knot_spacing``. A query at
``tau`` in knot interval ``s`` (``start + s*dt <= tau < start + (s+1)*dt``) blends control
points ``s-1 .. s+2``, so a spline with ``N`` control points is valid on
``[start + dt, start + (N-2)*dt)``.
"""

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import InvalidArgumentError, NoSegmentError, OutOfIntervalError
from .geometry import (
    Pose,
    Rotation,
    quat_conjugate,
    quat_exp,
    quat_log,
    quat_multiply,
    quat_to_matrix,
    rotation_exp_batch,
)

DEFAULT_KNOT_SPACING = 0.05
SPLINE_ORDER = 4


def _basis(u: np.ndarray) -> np.ndarray:
    """Cumulative cubic blending weights, shape (N, 3)"""
    u2 = u * u
    u3 = u2 * u
    return np.stack(
        [
            (u3 - 3.0 * u2 + 3.0 * u + 5.0) / 6.0,
            (-2.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0,
            u3 / 6.0,
        ],
        axis=-1,
    )


def _basis_derivative(u: np.ndarray) -> np.ndarray:
    """d lambda / d u, shape (N, 3)"""
    u2 = u * u
    return np.stack(
        [(3.0 * u2 - 6.0 * u + 3.0) / 6.0, (-6.0 * u2 + 6.0 * u + 3.0) / 6.0, 0.5 * u2], axis=-1
    )


def cumulative_basis(u: float) -> np.ndarray:
    """Cumulative basis vector (lambda_1, lambda_2, lambda_3) at normalized time u in [0, 1)"""
    if not 0.0 <= u < 1.0:
        raise InvalidArgumentError(f"normalized time must lie in [0, 1), got {u}")
    return _basis(np.array([u]))[0]


def position_weights(u: np.ndarray) -> np.ndarray:
    """Weights of control points first..first+3 in the blended position, shape (N, 4)"""
    lam = _basis(np.asarray(u, dtype=float))
    one = np.ones(len(lam))
    return np.stack(
        [one - lam[:, 0], lam[:, 0] - lam[:, 1], lam[:, 1] - lam[:, 2], lam[:, 2]], axis=-1
    )


def blend_positions(control_points: np.ndarray, first: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Cumulative blend of control points first..first+3 at normalized times u, shape (N, 3)"""
    lam = _basis(np.asarray(u, dtype=float))
    p = control_points[first].copy()
    for j in range(3):
        p += lam[:, j, None] * (control_points[first + j + 1] - control_points[first + j])
    return p


def _blend_rotations(
    control_quats: np.ndarray, deltas: np.ndarray, first: np.ndarray, u: np.ndarray
) -> np.ndarray:
    lam = _basis(np.asarray(u, dtype=float))
    q = control_quats[first]
    for j in range(3):
        q = quat_multiply(q, quat_exp(lam[:, j, None] * deltas[first + j]))
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def blend_rotations(control_quats: np.ndarray, first: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Cumulative SO(3) blend of control quaternions first..first+3, shape (N, 4)"""
    deltas = quat_log(quat_multiply(quat_conjugate(control_quats[:-1]), control_quats[1:]))
    return _blend_rotations(control_quats, deltas, first, u)


@dataclass(frozen=True)
class _UniformKnots(ABC):
    start_time: float
    knot_spacing: float

    def _check_knots(self, count: int) -> None:
        if not self.knot_spacing > 0:
            raise InvalidArgumentError(f"knot spacing must be positive, got {self.knot_spacing}")
        if count < SPLINE_ORDER:
            raise InvalidArgumentError(
                f"a cubic spline needs at least {SPLINE_ORDER} control points, got {count}"
            )

    @property
    @abstractmethod
    def count(self) -> int:
        """Number of control points"""

    @property
    def valid_interval(self) -> Tuple[float, float]:
        return (
            self.start_time + self.knot_spacing,
            self.start_time + (self.count - 2) * self.knot_spacing,
        )

    def knot_time(self, index: int) -> float:
        return self.start_time + index * self.knot_spacing

    def contains(self, tau: float) -> bool:
        lo, hi = self.valid_interval
        return lo <= tau < hi

    def locate(self, taus: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Knot-interval index and normalized time for each query; raises outside the interval"""
        taus = np.atleast_1d(np.asarray(taus, dtype=float))
        lo, hi = self.valid_interval
        outside = (taus < lo) | (taus >= hi) | ~np.isfinite(taus)
        if np.any(outside):
            raise OutOfIntervalError(float(taus[outside][0]), (lo, hi))
        x = (taus - self.start_time) / self.knot_spacing
        s = np.clip(np.floor(x).astype(int), 1, self.count - 3)
        u = np.clip(x - s, 0.0, np.nextafter(1.0, 0.0))
        return s, u

    def footprint(self, lo: float, hi: float, margin: float = 1e-9) -> Tuple[int, int]:
        """First control point index and count touched by any query in [lo, hi]"""
        first = int(np.floor((lo - self.start_time) / self.knot_spacing - margin))
        last = int(np.floor((hi - self.start_time) / self.knot_spacing + margin))
        first = min(max(first, 1), self.count - 3)
        last = min(max(last, 1), self.count - 3)
        return first - 1, last - first + SPLINE_ORDER


@dataclass(frozen=True, eq=False)
class PositionSpline(_UniformKnots):
    """Uniform cubic B-spline over R^3 in cumulative form"""

    control_points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self) -> None:
        cps = np.array(self.control_points, dtype=float).reshape(-1, 3)
        cps.setflags(write=False)
        object.__setattr__(self, "control_points", cps)
        self._check_knots(len(cps))

    @property
    def count(self) -> int:
        return len(self.control_points)

    def with_control_points(self, control_points: np.ndarray) -> "PositionSpline":
        return PositionSpline(self.start_time, self.knot_spacing, control_points)

    def evaluate(self, taus: Union[float, np.ndarray]) -> np.ndarray:
        """Positions at the query times, shape (N, 3)"""
        s, u = self.locate(taus)
        return blend_positions(self.control_points, s - 1, u)

    def velocity(self, taus: Union[float, np.ndarray]) -> np.ndarray:
        s, u = self.locate(taus)
        dlam = _basis_derivative(u) / self.knot_spacing
        cps = self.control_points
        v = np.zeros((len(s), 3))
        for j in range(3):
            v += dlam[:, j, None] * (cps[s + j] - cps[s + j - 1])
        return v


@dataclass(frozen=True, eq=False)
class RotationSpline(_UniformKnots):
    """Uniform cubic B-spline over SO(3) in cumulative form.

    ``control_points`` accepts a sequence of :class:`Rotation` or an (N, 4) quaternion array
    and is stored as the quaternion array.
    """

    control_points: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    _deltas: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        cps = self.control_points
        if len(cps) and isinstance(cps[0], Rotation):
            cps = np.array([r.quaternion for r in cps])
        cps = np.array(cps, dtype=float).reshape(-1, 4)
        cps /= np.linalg.norm(cps, axis=1, keepdims=True)
        cps.setflags(write=False)
        object.__setattr__(self, "control_points", cps)
        self._check_knots(len(cps))
        # Log(R_m^T R_{m+1}) for every neighbouring pair
        deltas = quat_log(quat_multiply(quat_conjugate(cps[:-1]), cps[1:]))
        deltas.setflags(write=False)
        object.__setattr__(self, "_deltas", deltas)

    @property
    def count(self) -> int:
        return len(self.control_points)

    @property
    def rotations(self) -> List[Rotation]:
        return [Rotation(q) for q in self.control_points]

    def with_control_points(self, control_points: Any) -> "RotationSpline":
        return RotationSpline(self.start_time, self.knot_spacing, control_points)

    def evaluate_quaternions(self, taus: Union[float, np.ndarray]) -> np.ndarray:
        s, u = self.locate(taus)
        return _blend_rotations(self.control_points, self._deltas, s - 1, u)

    def evaluate(self, taus: Union[float, np.ndarray]) -> np.ndarray:
        """Rotation matrices at the query times, shape (N, 3, 3)"""
        return quat_to_matrix(self.evaluate_quaternions(taus))

    def angular_velocity(self, taus: Union[float, np.ndarray]) -> np.ndarray:
        """Body-frame angular velocity, shape (N, 3)"""
        s, u = self.locate(taus)
        lam = _basis(u)
        dlam = _basis_derivative(u) / self.knot_spacing
        omega = dlam[:, 0, None] * self._deltas[s - 1]
        for j in (1, 2):
            d = self._deltas[s + j - 1]
            a = rotation_exp_batch(lam[:, j, None] * d)
            omega = np.einsum("nji,nj->ni", a, omega) + dlam[:, j, None] * d
        return omega


def eval_position(spline: PositionSpline, tau: float) -> np.ndarray:
    return spline.evaluate(tau)[0]


def eval_rotation(spline: RotationSpline, tau: float) -> Rotation:
    return Rotation(spline.evaluate_quaternions(tau)[0])


def eval_velocity(spline: PositionSpline, tau: float) -> np.ndarray:
    return spline.velocity(tau)[0]


def eval_angular_velocity(spline: RotationSpline, tau: float) -> np.ndarray:
    return spline.angular_velocity(tau)[0]


@dataclass(frozen=True, eq=False)
class TrajectorySegment:
    """One rotation + position spline pair valid on [t_min, t_max)"""

    rotation_spline: RotationSpline
    position_spline: PositionSpline
    t_min: float
    t_max: float

    def __post_init__(self) -> None:
        if not self.t_min < self.t_max:
            raise InvalidArgumentError(f"empty segment interval [{self.t_min}, {self.t_max})")
        for spline in (self.rotation_spline, self.position_spline):
            lo, hi = spline.valid_interval
            if self.t_min < lo or self.t_max > hi:
                raise InvalidArgumentError(
                    f"segment [{self.t_min}, {self.t_max}) exceeds spline interval [{lo}, {hi})"
                )

    def contains(self, tau: float) -> bool:
        return self.t_min <= tau < self.t_max

    def poses(self, taus: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Camera-to-world rotation matrices (N, 3, 3) and positions (N, 3)"""
        return self.rotation_spline.evaluate(taus), self.position_spline.evaluate(taus)

    def pose(self, tau: float) -> Pose:
        return Pose(
            eval_rotation(self.rotation_spline, tau), eval_position(self.position_spline, tau)
        )

    def with_control_points(self, rotations: Any, positions: np.ndarray) -> "TrajectorySegment":
        return TrajectorySegment(
            self.rotation_spline.with_control_points(rotations),
            self.position_spline.with_control_points(positions),
            self.t_min,
            self.t_max,
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "t_min": self.t_min,
            "t_max": self.t_max,
            "rotation": {
                "start_time": self.rotation_spline.start_time,
                "knot_spacing": self.rotation_spline.knot_spacing,
                "control_points": self.rotation_spline.control_points.tolist(),
            },
            "position": {
                "start_time": self.position_spline.start_time,
                "knot_spacing": self.position_spline.knot_spacing,
                "control_points": self.position_spline.control_points.tolist(),
            },
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrajectorySegment":
        rot, pos = data["rotation"], data["position"]
        return cls(
            RotationSpline(rot["start_time"], rot["knot_spacing"], np.array(rot["control_points"])),
            PositionSpline(pos["start_time"], pos["knot_spacing"], np.array(pos["control_points"])),
            data["t_min"],
            data["t_max"],
        )


@dataclass(frozen=True, eq=False)
class PiecewiseTrajectory:
    """Time-ordered, pairwise disjoint trajectory segments"""

    segments: Tuple[TrajectorySegment, ...] = ()

    def __post_init__(self) -> None:
        segments = tuple(self.segments)
        for previous, current in zip(segments, segments[1:]):
            if current.t_min < previous.t_max:
                raise InvalidArgumentError(
                    f"segments overlap or are unsorted at {current.t_min:.6f} s"
                )
        object.__setattr__(self, "segments", segments)

    def __len__(self) -> int:
        return len(self.segments)

    @property
    def span(self) -> Optional[Tuple[float, float]]:
        if not self.segments:
            return None
        return self.segments[0].t_min, self.segments[-1].t_max

    def segment_indices(self, taus: np.ndarray) -> np.ndarray:
        """Index of the segment covering each time, -1 where none does"""
        taus = np.atleast_1d(np.asarray(taus, dtype=float))
        if not self.segments:
            return np.full(len(taus), -1)
        starts = np.array([seg.t_min for seg in self.segments])
        ends = np.array([seg.t_max for seg in self.segments])
        idx = np.searchsorted(starts, taus, side="right") - 1
        safe = np.clip(idx, 0, None)
        covered = (idx >= 0) & (taus < ends[safe])
        return np.where(covered, idx, -1)

    def segment_index(self, tau: float) -> int:
        return int(self.segment_indices(np.array([tau]))[0])

    def covering_segment(self, lo: float, hi: float) -> int:
        """Segment containing the whole interval [lo, hi], or -1"""
        index = self.segment_index(lo)
        if index < 0 or not hi < self.segments[index].t_max:
            return -1
        return index

    def poses(self, taus: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Rotations (N, 3, 3), positions (N, 3) and a coverage mask for each query time.

        Uncovered entries hold the identity pose.
        """
        taus = np.atleast_1d(np.asarray(taus, dtype=float))
        idx = self.segment_indices(taus)
        rotations = np.tile(np.eye(3), (len(taus), 1, 1))
        positions = np.zeros((len(taus), 3))
        for index in np.unique(idx[idx >= 0]):
            sel = idx == index
            rotations[sel], positions[sel] = self.segments[index].poses(taus[sel])
        return rotations, positions, idx >= 0

    def to_dict(self) -> Dict[str, Any]:
        return {"segments": [segment.to_dict() for segment in self.segments]}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PiecewiseTrajectory":
        return cls(tuple(TrajectorySegment.from_dict(s) for s in data["segments"]))


def eval_pose(traj: PiecewiseTrajectory, tau: float) -> Pose:
    """Camera-to-world pose from the segment covering tau"""
    index = traj.segment_index(tau)
    if index < 0:
        raise NoSegmentError(tau)
    return traj.segments[index].pose(tau)


def make_segment(
    start_time: float,
    knot_spacing: float,
    rotations: Sequence[Any],
    positions: np.ndarray,
    t_min: Optional[float] = None,
    t_max: Optional[float] = None,
) -> TrajectorySegment:
    """Segment with shared knot timing; the interval defaults to the full valid range"""
    rotation_spline = RotationSpline(start_time, knot_spacing, rotations)
    position_spline = PositionSpline(start_time, knot_spacing, positions)
    lo, hi = position_spline.valid_interval
    return TrajectorySegment(
        rotation_spline,
        position_spline,
        lo if t_min is None else t_min,
        hi if t_max is None else t_max,
    )
