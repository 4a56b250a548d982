"""Rigid-body math: quaternions, rigid transforms and point-cloud containers.

Quaternions are stored scalar-first, ``(w, x, y, z)``, everywhere in the
package (including the file formats). All geometry runs in float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

UNIT_TOL = 1e-9


@dataclass(frozen=True)
class Quaternion:
    w: float
    x: float
    y: float
    z: float

    @classmethod
    def identity(cls) -> "Quaternion":
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, q) -> "Quaternion":
        q = np.asarray(q, dtype=np.float64).reshape(4)
        return cls(float(q[0]), float(q[1]), float(q[2]), float(q[3]))

    @classmethod
    def from_axis_angle(cls, axis, angle: float) -> "Quaternion":
        axis = np.asarray(axis, dtype=np.float64)
        n = np.linalg.norm(axis)
        if n == 0.0:
            raise ValueError("rotation axis must be non-zero")
        axis = axis / n
        s = np.sin(angle / 2.0)
        return cls(float(np.cos(angle / 2.0)), *(float(v) for v in axis * s))

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z], dtype=np.float64)

    def norm(self) -> float:
        return float(np.linalg.norm(self.as_array()))

    def normalize(self) -> "Quaternion":
        n = self.norm()
        if n == 0.0:
            raise ValueError("cannot normalize a zero quaternion")
        return Quaternion.from_array(self.as_array() / n)

    def __neg__(self) -> "Quaternion":
        return Quaternion(-self.w, -self.x, -self.y, -self.z)

    def __mul__(self, other: "Quaternion") -> "Quaternion":
        return Quaternion.from_array(quat_multiply(self.as_array(), other.as_array()))

    def conjugate(self) -> "Quaternion":
        return Quaternion(self.w, -self.x, -self.y, -self.z)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product of two (w, x, y, z) arrays."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def _check_unit(q: np.ndarray) -> None:
    n = float(np.linalg.norm(q))
    if abs(n - 1.0) > UNIT_TOL:
        raise ValueError(f"quaternion must have unit norm, got norm {n!r}")


def quat_to_rotmat(q) -> np.ndarray:
    """Rotation matrix of a unit quaternion.

    Raises:
        ValueError: if ``|q|`` differs from 1 by more than 1e-9.
    """
    q = q.as_array() if isinstance(q, Quaternion) else np.asarray(q, dtype=np.float64)
    _check_unit(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rotmat_to_quat(R: np.ndarray) -> Quaternion:
    """Convert a rotation matrix to a unit quaternion with ``w >= 0``.

    Branches on the largest of (trace, R00, R11, R22) so the square root is
    always taken of a quantity bounded away from zero, which keeps rotations
    near 180 degrees accurate.
    """
    R = np.asarray(R, dtype=np.float64)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    k = int(np.argmax([tr, R[0, 0], R[1, 1], R[2, 2]]))
    if k == 0:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif k == 1:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif k == 2:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.asarray(q)
    q /= np.linalg.norm(q)
    if q[0] < 0:
        q = -q
    return Quaternion.from_array(q)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """A pose ``[R|t]`` mapping object-frame points to the camera frame."""

    rotation: Quaternion = field(default_factory=Quaternion.identity)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        t.setflags(write=False)
        object.__setattr__(self, "translation", t)
        _check_unit(self.rotation.as_array())

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, R: np.ndarray, t) -> "RigidTransform":
        return cls(rotmat_to_quat(R), np.asarray(t, dtype=np.float64))

    @property
    def R(self) -> np.ndarray:
        return quat_to_rotmat(self.rotation)

    @property
    def t(self) -> np.ndarray:
        return self.translation

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix."""
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.translation
        return M

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.translation

    def inverse(self) -> "RigidTransform":
        return inverse(self)


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Ordered 3D points with optional per-point attribute rows.

    ``attributes`` maps a name (``"normals"``, ``"colors"``, ...) to an array
    whose first dimension equals the number of points.
    """

    points: np.ndarray
    attributes: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (n, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        attrs = {}
        for name, rows in dict(self.attributes).items():
            rows = np.asarray(rows)
            if rows.shape[0] != pts.shape[0]:
                raise ValueError(
                    f"attribute {name!r} has {rows.shape[0]} rows for {pts.shape[0]} points")
            attrs[name] = rows
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "attributes", attrs)

    def __len__(self) -> int:
        return self.points.shape[0]

    def take(self, idx) -> "PointCloud":
        """Subset (or reorder) points and all attribute rows together."""
        idx = np.asarray(idx)
        return PointCloud(self.points[idx], {k: v[idx] for k, v in self.attributes.items()})

    def with_points(self, points: np.ndarray) -> "PointCloud":
        return PointCloud(points, self.attributes)


def transform_points(T: RigidTransform, pc: PointCloud) -> PointCloud:
    """Map every point x to ``R x + t``; attributes are carried through."""
    if len(pc) == 0:
        raise ValueError("cannot transform an empty point cloud")
    return pc.with_points(T.apply(pc.points))


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """``a o b``: apply ``b`` first, then ``a``."""
    q = quat_multiply(a.rotation.as_array(), b.rotation.as_array())
    q /= np.linalg.norm(q)
    return RigidTransform(Quaternion.from_array(q), a.R @ b.translation + a.translation)


def inverse(T: RigidTransform) -> RigidTransform:
    qi = T.rotation.conjugate()
    return RigidTransform(qi, -(quat_to_rotmat(qi) @ T.translation))


def rotation_angle(T) -> float:
    """Geodesic rotation angle in radians of a transform or quaternion."""
    q = T.rotation if isinstance(T, RigidTransform) else T
    # 2*atan2(|v|, |w|) stays accurate for tiny angles, unlike acos.
    return float(2.0 * np.arctan2(np.linalg.norm([q.x, q.y, q.z]), abs(q.w)))


def rotation_error(a: RigidTransform, b: RigidTransform) -> float:
    """Angle of the relative rotation between two poses."""
    return rotation_angle(compose(inverse(a), b))


def sample_points(pc: PointCloud, n: int, seed: Optional[int] = None) -> PointCloud:
    """Draw ``n`` points, without replacement when the cloud is large enough."""
    if len(pc) == 0:
        raise ValueError("cannot sample from an empty point cloud")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(pc), size=n, replace=n > len(pc))
    return pc.take(idx)


def random_unit_quaternion(rng: np.random.Generator) -> Quaternion:
    """Uniformly distributed rotation (normalized 4D Gaussian)."""
    q = rng.standard_normal(4)
    return Quaternion.from_array(q / np.linalg.norm(q))


def random_pose(rotation_bound: float, translation_bound: float, seed=None) -> RigidTransform:
    """Random pose with angle <= ``rotation_bound`` and ``|t| <= translation_bound``.

    Axis is uniform on the sphere, angle uniform on ``[0, rotation_bound]``,
    translation uniform over the ball.
    """
    if rotation_bound < 0 or translation_bound < 0:
        raise ValueError("bounds must be non-negative")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, rotation_bound)
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    radius = translation_bound * rng.uniform() ** (1.0 / 3.0)
    if rotation_bound == 0:
        q = Quaternion.identity()
    else:
        q = Quaternion.from_axis_angle(axis, angle)
    return RigidTransform(q, direction * radius)


def max_pairwise_distance(points: np.ndarray) -> float:
    """Exact diameter of a point set (max distance between any two points)."""
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) < 2:
        return 0.0
    if len(pts) > 64:
        from scipy.spatial import ConvexHull, QhullError

        try:
            pts = pts[ConvexHull(pts).vertices]
        except QhullError:
            pass  # flat or degenerate sets: fall back to all points
    best = 0.0
    for start in range(0, len(pts), 512):
        block = pts[start:start + 512]
        d2 = np.sum((block[:, None, :] - pts[None, :, :]) ** 2, axis=-1)
        best = max(best, float(d2.max()))
    return float(np.sqrt(best))
