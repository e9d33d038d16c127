"""Rotation and rigid-pose algebra.

Poses are world-to-camera extrinsics, ``x_cam = R @ x_world + t``, so the
camera center is ``c = -R.T @ t``. Quaternions are stored ``(w, x, y, z)``
and kept on the ``w >= 0`` hemisphere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

CONVENTION = "w2c"
TRANSLATION_EPS = 1e-9
_UNIT_TOL = 1e-6


class PreconditionError(ValueError):
    """Input violates a documented precondition."""


class Quaternion(NamedTuple):
    w: float
    x: float
    y: float
    z: float

    @classmethod
    def identity(cls) -> "Quaternion":
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, a) -> "Quaternion":
        a = np.asarray(a, dtype=np.float64)
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))

    def as_array(self) -> np.ndarray:
        return np.array(self, dtype=np.float64)

    def norm(self) -> float:
        return math.sqrt(self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z)

    def normalize(self) -> "Quaternion":
        n = self.norm()
        if not n > 0.0 or not math.isfinite(n):
            raise PreconditionError(f"cannot normalize quaternion with norm {n}")
        return Quaternion(self.w / n, self.x / n, self.y / n, self.z / n)

    def canonical(self) -> "Quaternion":
        """Flip onto the w > 0 hemisphere; for w == 0 the first nonzero of x, y, z is made positive."""
        for v in self:
            if v != 0.0:
                if v < 0.0:
                    return Quaternion(-self.w, -self.x, -self.y, -self.z)
                return self
        return self


def canonical_quat_array(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    for v in q:
        if v != 0.0:
            return -q if v < 0.0 else q
    return q


def quat_to_rot(q: Quaternion) -> np.ndarray:
    """Rotation matrix of a unit quaternion.

    Raises PreconditionError when ``q`` deviates from unit norm by more than 1e-6.
    """
    q = Quaternion(*q)
    n = q.norm()
    if not abs(n - 1.0) <= _UNIT_TOL:
        raise PreconditionError(f"quaternion is not unit norm (|q| = {n})")
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ],
        dtype=np.float64,
    )


def check_rotation(R: np.ndarray, tol: float = _UNIT_TOL) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise PreconditionError(f"expected a finite 3x3 matrix, got shape {R.shape}")
    if np.max(np.abs(R.T @ R - np.eye(3))) > tol or abs(np.linalg.det(R) - 1.0) > tol:
        raise PreconditionError("matrix is not a proper rotation")
    return R


def rot_to_quat(R: np.ndarray) -> Quaternion:
    """Canonical unit quaternion of a rotation matrix (Shepperd's branch selection)."""
    R = check_rotation(R)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    diag = (tr, R[0, 0], R[1, 1], R[2, 2])
    i = int(np.argmax(diag))
    if i == 0:
        s = 2.0 * math.sqrt(1.0 + tr)
        q = (0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s)
    elif i == 1:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = ((R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s)
    elif i == 2:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = ((R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s)
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = ((R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s)
    return Quaternion(*(float(v) for v in q)).normalize().canonical()


@dataclass(frozen=True)
class Pose:
    """Rigid world-to-camera transform."""

    rotation: Quaternion
    translation: np.ndarray

    def __post_init__(self):
        q = Quaternion(*self.rotation)
        if not abs(q.norm() - 1.0) <= _UNIT_TOL:
            raise PreconditionError(f"pose rotation is not unit norm (|q| = {q.norm()})")
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(t)):
            raise PreconditionError("pose translation is not finite")
        t.setflags(write=False)
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(Quaternion.identity(), np.zeros(3))

    @classmethod
    def from_rt(cls, R: np.ndarray, t) -> "Pose":
        return cls(rot_to_quat(R), t)

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "Pose":
        T = np.asarray(T, dtype=np.float64)
        return cls.from_rt(T[:3, :3], T[:3, 3])

    @classmethod
    def from_center(cls, R: np.ndarray, center) -> "Pose":
        R = np.asarray(R, dtype=np.float64)
        return cls.from_rt(R, -R @ np.asarray(center, dtype=np.float64))

    @property
    def R(self) -> np.ndarray:
        return quat_to_rot(self.rotation)

    @property
    def t(self) -> np.ndarray:
        return self.translation

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.translation

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Map world points (N, 3) into this camera's frame."""
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.translation

    def to_dict(self) -> dict:
        return {"q": [float(v) for v in self.rotation], "t": [float(v) for v in self.translation]}

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        return cls(Quaternion(*(float(v) for v in d["q"])), [float(v) for v in d["t"]])

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return tuple(self.rotation) == tuple(other.rotation) and np.array_equal(
            self.translation, other.translation
        )

    def __hash__(self):
        return hash((tuple(self.rotation), tuple(self.translation)))


@dataclass(frozen=True, eq=False)
class Sim3:
    """Similarity transform ``x -> scale * R @ x + translation``."""

    scale: float
    rotation: Quaternion
    translation: np.ndarray

    def __post_init__(self):
        if not self.scale > 0:
            raise PreconditionError(f"Sim3 scale must be positive, got {self.scale}")
        object.__setattr__(self, "rotation", Quaternion(*self.rotation))
        object.__setattr__(self, "translation", np.array(self.translation, dtype=np.float64).reshape(3))

    @property
    def R(self) -> np.ndarray:
        return quat_to_rot(self.rotation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(points, dtype=np.float64) @ self.R.T + self.translation


def compose(a: Pose, b: Pose) -> Pose:
    """``a ∘ b``: apply ``b`` first, then ``a``."""
    Ra, Rb = a.R, b.R
    return Pose.from_rt(Ra @ Rb, Ra @ b.translation + a.translation)


def inverse(p: Pose) -> Pose:
    R = p.R
    return Pose.from_rt(R.T, -R.T @ p.translation)


def relative_pose(a: Pose, b: Pose) -> Pose:
    """Pose of camera ``b`` expressed in camera ``a``'s frame: ``T_b ∘ T_a⁻¹``.

    Maps points from ``a``'s camera frame into ``b``'s, so that
    ``compose(relative_pose(a, b), a) == b``.
    """
    return compose(b, inverse(a))


def _angle(sin_part: float, cos_part: float) -> float:
    return math.degrees(math.atan2(max(sin_part, 0.0), cos_part))


def rotation_angle_error(Ra: np.ndarray, Rb: np.ndarray) -> float:
    """Geodesic angle in degrees between two rotations, in [0, 180]."""
    M = np.asarray(Ra, dtype=np.float64).T @ np.asarray(Rb, dtype=np.float64)
    cos_part = (np.trace(M) - 1.0) / 2.0
    # atan2 form of arccos((tr - 1) / 2); stays accurate near 0 and 180 degrees
    vee = np.array([M[2, 1] - M[1, 2], M[0, 2] - M[2, 0], M[1, 0] - M[0, 1]])
    sin_part = np.linalg.norm(vee) / 2.0
    return _angle(sin_part, cos_part)


def translation_angle_error(ta, tb, eps: float = TRANSLATION_EPS) -> float:
    ta = np.asarray(ta, dtype=np.float64)
    tb = np.asarray(tb, dtype=np.float64)
    na, nb = np.linalg.norm(ta), np.linalg.norm(tb)
    small_a, small_b = na < eps, nb < eps
    if small_a and small_b:
        return 0.0
    if small_a or small_b:
        return 180.0
    return _angle(np.linalg.norm(np.cross(ta, tb)) / (na * nb), float(ta @ tb) / (na * nb))


def flatten_pose(p: Pose) -> np.ndarray:
    """Row-major ``[R | t]``: 9 rotation entries followed by 3 translation entries."""
    return np.concatenate([p.R.reshape(9), p.translation])


def unflatten_pose(v) -> Pose:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (12,):
        raise PreconditionError(f"expected a 12-vector, got shape {v.shape}")
    return Pose.from_rt(v[:9].reshape(3, 3), v[9:])


def normalize_poses(poses: Sequence[Pose]) -> tuple[list[Pose], float]:
    """Divide translations by the mean camera-center distance from the origin.

    Poses are expected relative to the first frame. When the mean distance is
    below 1e-9 the poses are returned unchanged with scale 1.
    """
    if len(poses) == 0:
        raise PreconditionError("normalize_poses needs at least one pose")
    s = float(np.mean([np.linalg.norm(p.center) for p in poses]))
    if s < 1e-9:
        return list(poses), 1.0
    return [Pose(p.rotation, p.translation / s) for p in poses], s


def relative_to_first(poses: Sequence[Pose]) -> list[Pose]:
    """Re-express poses so the first one becomes the identity."""
    first = poses[0]
    return [relative_pose(first, p) for p in poses]


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def exp_so3(w) -> np.ndarray:
    """Rodrigues map from an axis-angle vector (radians) to a rotation matrix."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    K = skew(w)
    if theta < 1e-12:
        return np.eye(3) + K
    return np.eye(3) + math.sin(theta) / theta * K + (1 - math.cos(theta)) / theta**2 * K @ K


def rotation_about(axis, degrees: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    return exp_so3(axis / np.linalg.norm(axis) * math.radians(degrees))


def random_quaternion(rng: np.random.Generator) -> Quaternion:
    """Uniformly distributed rotation as a canonical unit quaternion."""
    v = rng.standard_normal(4)
    return Quaternion(*v).normalize().canonical()


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    return quat_to_rot(random_quaternion(rng))


def random_pose(rng: np.random.Generator, translation_scale: float = 1.0) -> Pose:
    return Pose(random_quaternion(rng), rng.standard_normal(3) * translation_scale)


def look_at(center, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """World-to-camera pose of a camera at ``center`` whose +z axis points at ``target``."""
    center = np.asarray(center, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - center
    z = z / np.linalg.norm(z)
    up = np.asarray(up, dtype=np.float64)
    if abs(float(z @ up)) > 0.999:
        up = np.array([1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    x = np.cross(up, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return Pose.from_center(R, center)
