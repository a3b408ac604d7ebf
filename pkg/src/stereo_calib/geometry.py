"""
Lie-group primitives, rigid transforms and the pinhole + radial-tangential camera model.

Rotations are stored as unit quaternions ``(w, x, y, z)`` and renormalized after every
composition. The ``quat_*`` helpers are vectorized over any number of leading axes; the
spline and the solvers use them directly to evaluate thousands of poses per call.
"""

from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import BehindCameraError, InvalidArgumentError

SMALL_ANGLE = 1e-8
MIN_DEPTH = 1e-6

ArrayLike = Union[Sequence[float], np.ndarray]


# ----------------------------------------------------------------------------------------------
# Vectorized quaternion helpers
# ----------------------------------------------------------------------------------------------


def skew(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrices of vectors with shape (..., 3)"""
    v = np.asarray(v, dtype=float)
    zero = np.zeros(v.shape[:-1])
    return np.stack(
        [
            np.stack([zero, -v[..., 2], v[..., 1]], axis=-1),
            np.stack([v[..., 2], zero, -v[..., 0]], axis=-1),
            np.stack([-v[..., 1], v[..., 0], zero], axis=-1),
        ],
        axis=-2,
    )


def quat_normalize(q: np.ndarray) -> np.ndarray:
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product, broadcasting over leading axes"""
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=float), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=float), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_exp(omega: np.ndarray) -> np.ndarray:
    """Rodrigues exponential of rotation vectors (..., 3) to unit quaternions (..., 4)"""
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega, axis=-1)
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    half = 0.5 * theta
    # second-order Taylor expansion below SMALL_ANGLE
    w = np.where(small, 1.0 - theta**2 / 8.0, np.cos(half))
    scale = np.where(small, 0.5 - theta**2 / 48.0, np.sin(half) / safe)
    return np.concatenate([w[..., None], scale[..., None] * omega], axis=-1)


def quat_log(q: np.ndarray) -> np.ndarray:
    """Principal logarithm of unit quaternions (..., 4) to rotation vectors with norm <= pi.

    At exactly pi the axis sign is chosen so that its largest-magnitude component is
    nonnegative.
    """
    q = np.asarray(q, dtype=float)
    q = np.where(q[..., :1] < 0.0, -q, q)
    w = q[..., 0]
    v = q[..., 1:]
    n = np.linalg.norm(v, axis=-1)
    small = n < SMALL_ANGLE * 0.5
    safe_n = np.where(small, 1.0, n)
    safe_w = np.where(small, w, 1.0)
    theta = 2.0 * np.arctan2(n, w)
    scale = np.where(small, 2.0 / safe_w * (1.0 - n**2 / (3.0 * safe_w**2)), theta / safe_n)
    omega = scale[..., None] * v

    at_pi = w < 1e-12
    if np.any(at_pi):
        largest = np.take_along_axis(omega, np.abs(omega).argmax(axis=-1)[..., None], axis=-1)
        flip = at_pi[..., None] & (largest < 0.0)
        omega = np.where(flip, -omega, omega)
    return omega


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1),
        ],
        axis=-2,
    )


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Rotation matrices (..., 3, 3) to unit quaternions via the largest-diagonal branch"""
    m = np.asarray(m, dtype=float)
    m00, m11, m22 = m[..., 0, 0], m[..., 1, 1], m[..., 2, 2]
    trace = m00 + m11 + m22
    candidates = np.stack([trace, m00, m11, m22], axis=-1)
    branch = candidates.argmax(axis=-1)

    q = np.empty(m.shape[:-2] + (4,))
    # trace branch
    s = np.sqrt(np.maximum(1.0 + trace, 1e-300)) * 2.0
    q_w = np.stack(
        [0.25 * s, (m[..., 2, 1] - m[..., 1, 2]) / s, (m[..., 0, 2] - m[..., 2, 0]) / s,
         (m[..., 1, 0] - m[..., 0, 1]) / s],
        axis=-1,
    )
    s = np.sqrt(np.maximum(1.0 + m00 - m11 - m22, 1e-300)) * 2.0
    q_x = np.stack(
        [(m[..., 2, 1] - m[..., 1, 2]) / s, 0.25 * s, (m[..., 0, 1] + m[..., 1, 0]) / s,
         (m[..., 0, 2] + m[..., 2, 0]) / s],
        axis=-1,
    )
    s = np.sqrt(np.maximum(1.0 + m11 - m00 - m22, 1e-300)) * 2.0
    q_y = np.stack(
        [(m[..., 0, 2] - m[..., 2, 0]) / s, (m[..., 0, 1] + m[..., 1, 0]) / s, 0.25 * s,
         (m[..., 1, 2] + m[..., 2, 1]) / s],
        axis=-1,
    )
    s = np.sqrt(np.maximum(1.0 + m22 - m00 - m11, 1e-300)) * 2.0
    q_z = np.stack(
        [(m[..., 1, 0] - m[..., 0, 1]) / s, (m[..., 0, 2] + m[..., 2, 0]) / s,
         (m[..., 1, 2] + m[..., 2, 1]) / s, 0.25 * s],
        axis=-1,
    )
    q = np.where((branch == 0)[..., None], q_w, q)
    q = np.where((branch == 1)[..., None], q_x, q)
    q = np.where((branch == 2)[..., None], q_y, q)
    q = np.where((branch == 3)[..., None], q_z, q)
    q = np.where(q[..., :1] < 0.0, -q, q)
    return quat_normalize(q)


def rotation_log_batch(m: np.ndarray) -> np.ndarray:
    """Logarithm of rotation matrices (..., 3, 3)"""
    return quat_log(matrix_to_quat(m))


def rotation_exp_batch(omega: np.ndarray) -> np.ndarray:
    """Exponential of rotation vectors (..., 3) as rotation matrices"""
    return quat_to_matrix(quat_exp(omega))


# ----------------------------------------------------------------------------------------------
# Rotation and Pose value types
# ----------------------------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Rotation:
    """Element of SO(3) stored as a unit quaternion (w, x, y, z)"""

    quaternion: np.ndarray

    def __post_init__(self) -> None:
        q = np.asarray(self.quaternion, dtype=float).reshape(4)
        if not np.all(np.isfinite(q)):
            raise InvalidArgumentError("rotation quaternion must be finite")
        q = quat_normalize(q)
        if q[0] < 0.0:
            q = -q
        q.setflags(write=False)
        object.__setattr__(self, "quaternion", q)

    @classmethod
    def identity(cls) -> "Rotation":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def from_matrix(cls, matrix: ArrayLike) -> "Rotation":
        return cls(matrix_to_quat(np.asarray(matrix, dtype=float).reshape(3, 3)))

    @classmethod
    def exp(cls, omega: ArrayLike) -> "Rotation":
        return so3_exp(omega)

    def log(self) -> np.ndarray:
        return so3_log(self)

    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.quaternion)

    def inverse(self) -> "Rotation":
        return Rotation(quat_conjugate(self.quaternion))

    def compose(self, other: "Rotation") -> "Rotation":
        return Rotation(quat_multiply(self.quaternion, other.quaternion))

    def __matmul__(self, other: "Rotation") -> "Rotation":
        return self.compose(other)

    def apply(self, vectors: ArrayLike) -> np.ndarray:
        """Rotate a 3-vector or an (N, 3) array"""
        return np.asarray(vectors, dtype=float) @ self.matrix().T

    def angle_to(self, other: "Rotation") -> float:
        """Geodesic distance in radians"""
        return float(np.linalg.norm(so3_log(self.inverse() @ other)))

    def __repr__(self) -> str:
        w, x, y, z = self.quaternion
        return f"Rotation(w={w:.6f}, x={x:.6f}, y={y:.6f}, z={z:.6f})"


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform: x' = rotation * x + translation"""

    rotation: Rotation = field(default_factory=Rotation.identity)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        t = np.array(self.translation, dtype=float).reshape(3)
        t.setflags(write=False)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, matrix: ArrayLike) -> "Pose":
        m = np.asarray(matrix, dtype=float)
        return cls(Rotation.from_matrix(m[:3, :3]), m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation.matrix()
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "Pose") -> "Pose":
        return pose_compose(self, other)

    def inverse(self) -> "Pose":
        return pose_inverse(self)

    def __matmul__(self, other: "Pose") -> "Pose":
        return pose_compose(self, other)

    def apply(self, points: ArrayLike) -> np.ndarray:
        """Transform a 3-vector or an (N, 3) array of points"""
        return self.rotation.apply(points) + self.translation

    def __repr__(self) -> str:
        tx, ty, tz = self.translation
        return f"Pose({self.rotation!r}, t=[{tx:.6f}, {ty:.6f}, {tz:.6f}])"


def so3_exp(omega: ArrayLike) -> Rotation:
    """Exponential map from so(3) to SO(3)"""
    omega = np.asarray(omega, dtype=float).reshape(3)
    if not np.all(np.isfinite(omega)):
        raise InvalidArgumentError(f"tangent vector must be finite, got {omega}")
    return Rotation(quat_exp(omega))


def so3_log(rotation: Rotation) -> np.ndarray:
    """Principal logarithm, result norm <= pi"""
    return quat_log(rotation.quaternion)


def pose_compose(a: Pose, b: Pose) -> Pose:
    return Pose(a.rotation @ b.rotation, a.rotation.apply(b.translation) + a.translation)


def pose_inverse(a: Pose) -> Pose:
    inv = a.rotation.inverse()
    return Pose(inv, -inv.apply(a.translation))


# ----------------------------------------------------------------------------------------------
# Camera model
# ----------------------------------------------------------------------------------------------


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole projection with radial-tangential distortion"""

    fx: float
    fy: float
    cx: float
    cy: float
    k1: float = 0.0
    k2: float = 0.0
    p1: float = 0.0
    p2: float = 0.0
    width: Optional[int] = None
    height: Optional[int] = None

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidArgumentError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if self.width is not None and not 0 <= self.cx <= self.width:
            raise InvalidArgumentError(f"cx={self.cx} outside sensor width {self.width}")
        if self.height is not None and not 0 <= self.cy <= self.height:
            raise InvalidArgumentError(f"cy={self.cy} outside sensor height {self.height}")

    @property
    def distortion(self) -> Tuple[float, float, float, float]:
        return (self.k1, self.k2, self.p1, self.p2)

    @property
    def matrix(self) -> np.ndarray:
        """2x3 intrinsic matrix applied to distorted homogeneous coordinates"""
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy]])

    def in_image(self, pixels: np.ndarray) -> np.ndarray:
        """Mask of pixels inside the declared sensor; all True without a sensor size"""
        pixels = np.atleast_2d(pixels)
        mask = np.ones(len(pixels), dtype=bool)
        if self.width is not None:
            mask &= (pixels[:, 0] >= 0.0) & (pixels[:, 0] < self.width)
        if self.height is not None:
            mask &= (pixels[:, 1] >= 0.0) & (pixels[:, 1] < self.height)
        return mask

    def to_dict(self) -> Dict[str, Any]:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "k1": self.k1,
            "k2": self.k2,
            "p1": self.p1,
            "p2": self.p2,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "CameraIntrinsics":
        return cls(**data)


def distort_points(xy: np.ndarray, dist: Sequence[float]) -> np.ndarray:
    """Radial-tangential distortion of normalized coordinates with shape (N, 2)"""
    k1, k2, p1, p2 = dist
    x, y = xy[..., 0], xy[..., 1]
    r2 = x * x + y * y
    radial = 1.0 + k1 * r2 + k2 * r2 * r2
    xd = x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x)
    yd = y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y
    return np.stack([xd, yd], axis=-1)


def distort(normalized_point: ArrayLike, dist: Sequence[float]) -> np.ndarray:
    """Distort a normalized image point; returns the homogeneous 3-vector (x', y', 1)"""
    p = np.asarray(normalized_point, dtype=float)
    if p.shape == (3,):
        p = p[:2] / p[2]
    if all(d == 0.0 for d in dist):
        return np.array([p[0], p[1], 1.0])
    xd = distort_points(p.reshape(1, 2), dist)[0]
    return np.array([xd[0], xd[1], 1.0])


def project_points(points_cam: ArrayLike, intr: CameraIntrinsics) -> np.ndarray:
    """Project (N, 3) camera-frame points to (N, 2) pixels"""
    p = np.atleast_2d(np.asarray(points_cam, dtype=float))
    z = p[:, 2]
    if np.any(z <= MIN_DEPTH):
        raise BehindCameraError(f"{int(np.sum(z <= MIN_DEPTH))} point(s) at or behind the camera")
    xy = p[:, :2] / z[:, None]
    xd = distort_points(xy, intr.distortion)
    return np.stack([intr.fx * xd[:, 0] + intr.cx, intr.fy * xd[:, 1] + intr.cy], axis=-1)


def project(point_cam: ArrayLike, intr: CameraIntrinsics) -> np.ndarray:
    """Project one camera-frame point to pixels"""
    return project_points(np.asarray(point_cam, dtype=float).reshape(1, 3), intr)[0]


def projection_jacobian(points_cam: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """d pixel / d point_cam for (N, 3) points, shape (N, 2, 3)"""
    p = np.atleast_2d(points_cam)
    X, Y, Z = p[:, 0], p[:, 1], p[:, 2]
    x, y = X / Z, Y / Z
    k1, k2, p1, p2 = intr.distortion

    r2 = x * x + y * y
    radial = 1.0 + k1 * r2 + k2 * r2 * r2
    d_radial = 2.0 * (k1 + 2.0 * k2 * r2)  # d radial / d x = d_radial * x

    dxd_dx = radial + x * x * d_radial + 2.0 * p1 * y + 6.0 * p2 * x
    dxd_dy = x * y * d_radial + 2.0 * p1 * x + 2.0 * p2 * y
    dyd_dx = y * x * d_radial + 2.0 * p1 * x + 2.0 * p2 * y
    dyd_dy = radial + y * y * d_radial + 6.0 * p1 * y + 2.0 * p2 * x

    inv_z = 1.0 / Z
    dn = np.zeros((len(p), 2, 3))
    dn[:, 0, 0] = inv_z
    dn[:, 0, 2] = -x * inv_z
    dn[:, 1, 1] = inv_z
    dn[:, 1, 2] = -y * inv_z

    dd = np.empty((len(p), 2, 2))
    dd[:, 0, 0] = intr.fx * dxd_dx
    dd[:, 0, 1] = intr.fx * dxd_dy
    dd[:, 1, 0] = intr.fy * dyd_dx
    dd[:, 1, 1] = intr.fy * dyd_dy
    return dd @ dn
