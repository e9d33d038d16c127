"""Absolute query pose from per-reference relative estimates.

Two strategies are provided. Motion averaging triangulates the query center
from the translation directions of the relative poses and takes the geodesic
medoid of the per-reference rotation candidates. Umeyama alignment fits a
similarity transform between the predicted and known reference centers and
maps the predicted query pose through it.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geom import Pose, Sim3, rot_to_quat, rotation_angle_error

MIN_BASELINE = 1e-9
MAX_CONDITION = 1e12


class DegenerateGeometry(ValueError):
    """The configuration does not determine a unique solution."""


class ScaleMethod(str, enum.Enum):
    MOTION_AVERAGING = "motion_averaging"
    UMEYAMA = "umeyama"

    @classmethod
    def parse(cls, value: str) -> "ScaleMethod":
        aliases = {"motion": cls.MOTION_AVERAGING, "motion_avg": cls.MOTION_AVERAGING}
        if value in aliases:
            return aliases[value]
        return cls(value)

    @property
    def min_references(self) -> int:
        return 2 if self is ScaleMethod.MOTION_AVERAGING else 3


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        n = np.linalg.norm(d)
        if not n > 0:
            raise DegenerateGeometry("ray direction has zero length")
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))
        object.__setattr__(self, "direction", d / n)

    def distance(self, x: np.ndarray) -> float:
        """Distance from ``x`` to the infinite line carrying the ray."""
        v = np.asarray(x, dtype=np.float64) - self.origin
        return float(np.linalg.norm(v - (v @ self.direction) * self.direction))


@dataclass(frozen=True)
class AbsolutePoseEstimate:
    pose: Pose
    method: ScaleMethod
    num_candidates: int
    residual: float


def query_rays(ref_poses: Sequence[Pose], rel_poses: Sequence[Pose]) -> list[Ray]:
    """World-frame rays from each reference center toward the query.

    ``rel_poses[i]`` maps reference ``i``'s camera frame into the query's
    (``relative_pose(ref_i, query)``). Only the direction of its translation is
    used; references whose relative translation is numerically zero are skipped.
    """
    if len(ref_poses) != len(rel_poses):
        raise ValueError(f"got {len(ref_poses)} reference poses but {len(rel_poses)} relative poses")
    rays = []
    for ref, rel in zip(ref_poses, rel_poses):
        if np.linalg.norm(rel.translation) < MIN_BASELINE:
            continue
        # query center in the reference camera frame, then rotated into the world
        c_local = -rel.R.T @ rel.translation
        rays.append(Ray(ref.center, ref.R.T @ c_local))
    if not rays:
        raise DegenerateGeometry("every relative translation is zero; no rays to triangulate")
    return rays


def triangulate_point(rays: Sequence[Ray]) -> np.ndarray:
    """Least-squares point closest to a bundle of lines.

    Minimizes ``sum_i |(I - d_i d_i^T)(x - o_i)|^2`` through its 3x3 normal
    equations.
    """
    if len(rays) < 2:
        raise DegenerateGeometry(f"need at least 2 rays, got {len(rays)}")
    A = np.zeros((3, 3))
    b = np.zeros(3)
    for ray in rays:
        P = np.eye(3) - np.outer(ray.direction, ray.direction)
        A += P
        b += P @ ray.origin
    cond = np.linalg.cond(A)
    if not cond <= MAX_CONDITION:
        raise DegenerateGeometry(f"ray bundle is near-parallel (condition number {cond:.3g})")
    return np.linalg.solve(A, b)


def median_rotation(candidates: Sequence[np.ndarray]) -> np.ndarray:
    """Geodesic medoid: the candidate with the smallest summed angle to all others.

    Ties go to the lowest index.
    """
    if len(candidates) == 0:
        raise ValueError("median_rotation needs at least one candidate")
    n = len(candidates)
    D = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            D[i, j] = D[j, i] = rotation_angle_error(candidates[i], candidates[j])
    return np.asarray(candidates[int(np.argmin(D.sum(axis=1)))], dtype=np.float64)


def absolute_pose_motion_avg(ref_poses: Sequence[Pose], rel_poses: Sequence[Pose]) -> AbsolutePoseEstimate:
    if len(ref_poses) != len(rel_poses):
        raise ValueError(f"got {len(ref_poses)} reference poses but {len(rel_poses)} relative poses")
    rays = query_rays(ref_poses, rel_poses)
    if len(rays) < 2:
        raise DegenerateGeometry(f"motion averaging needs 2 usable references, got {len(rays)}")
    center = triangulate_point(rays)
    # w2c: R_query = R_rel @ R_ref
    R = median_rotation([rel.R @ ref.R for ref, rel in zip(ref_poses, rel_poses)])
    residual = float(np.mean([ray.distance(center) for ray in rays]))
    return AbsolutePoseEstimate(
        Pose.from_center(R, center), ScaleMethod.MOTION_AVERAGING, len(rel_poses), residual
    )


def umeyama_sim3(src, dst) -> Sim3:
    """Least-squares similarity transform with ``dst ≈ s * R @ src + t``."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError(f"expected matching (N, 3) point sets, got {src.shape} and {dst.shape}")
    n = src.shape[0]
    if n < 3:
        raise DegenerateGeometry(f"Umeyama alignment needs at least 3 points, got {n}")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    var_s = float((xs**2).sum()) / n
    sv_src = np.linalg.svd(xs, compute_uv=False)
    if var_s <= 0 or sv_src[1] <= 1e-10 * sv_src[0]:
        raise DegenerateGeometry("source points are collinear or coincident")
    cov = xd.T @ xs / n
    U, D, Vt = np.linalg.svd(cov)
    sv_dst = np.linalg.svd(xd, compute_uv=False)
    if sv_dst[1] <= 1e-10 * max(sv_dst[0], 1e-300):
        raise DegenerateGeometry("destination points are collinear or coincident")
    S = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2] = -1.0
    R = U @ np.diag(S) @ Vt
    scale = float((D * S).sum() / var_s)
    if not scale > 0:
        raise DegenerateGeometry(f"alignment produced non-positive scale {scale}")
    t = mu_d - scale * R @ mu_s
    return Sim3(scale, rot_to_quat(R), t)


def alignment_residual(sim: Sim3, src, dst) -> float:
    return float(np.mean(np.linalg.norm(sim.apply(src) - np.asarray(dst, dtype=np.float64), axis=1)))


def absolute_pose_umeyama(
    ref_poses: Sequence[Pose],
    predicted_ref_poses: Sequence[Pose],
    predicted_query_pose: Pose,
) -> AbsolutePoseEstimate:
    """Map a query pose predicted in the model's relative frame into the world.

    A similarity transform is fit from the predicted reference centers to the
    known reference centers and applied to the predicted query camera.
    """
    if len(ref_poses) != len(predicted_ref_poses):
        raise ValueError(
            f"got {len(ref_poses)} reference poses but {len(predicted_ref_poses)} predictions"
        )
    if len(ref_poses) < 3:
        raise DegenerateGeometry(f"Umeyama alignment needs 3 references, got {len(ref_poses)}")
    src = np.stack([p.center for p in predicted_ref_poses])
    dst = np.stack([p.center for p in ref_poses])
    sim = umeyama_sim3(src, dst)
    center = sim.apply(predicted_query_pose.center[None])[0]
    # world -> relative frame is R_sim^T (up to scale), so R_query_world = R_query_rel @ R_sim^T
    R = predicted_query_pose.R @ sim.R.T
    return AbsolutePoseEstimate(
        Pose.from_center(R, center), ScaleMethod.UMEYAMA, len(ref_poses), alignment_residual(sim, src, dst)
    )
