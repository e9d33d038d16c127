"""Synthetic scenes, landmark visibility, feature-map rendering and scene files.

A scene is a cloud of landmarks with descriptors observed by pinhole
cameras on a shell around the origin. Instead of pixel images each frame
stores a coarse feature map: visible landmarks are projected and their
descriptors averaged per grid cell, with the last channel holding the cell's
hit count divided by the number of landmarks.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .geom import CONVENTION, Pose, look_at, rotation_about

SCENE_SCHEMA = "mlk-scene/1"
GENERATOR_VERSION = "2"
MIN_DEPTH = 1e-6
EMBEDDING_DIM = 32
MAX_FRAME_ATTEMPTS = 100
MIN_QUERY_COVIS = 0.2


class SceneFormatError(ValueError):
    """Scene file is malformed."""


class SchemaVersionError(SceneFormatError):
    """Scene file declares an unsupported schema."""


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics in patch-grid units (one unit = one grid cell)."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @classmethod
    def from_fov(cls, fov_degrees: float, grid: tuple[int, int]) -> "Intrinsics":
        ph, pw = grid
        f = (pw / 2.0) / math.tan(math.radians(fov_degrees) / 2.0)
        return cls(f, f, pw / 2.0, ph / 2.0)


@dataclass(frozen=True, eq=False)
class Frame:
    id: str
    pose: Pose
    intrinsics: Intrinsics
    feature_map: np.ndarray
    embedding: np.ndarray
    split: str = "database"

    def __post_init__(self):
        if self.split not in ("database", "query"):
            raise ValueError(f"unknown split {self.split!r}")
        if not np.all(np.isfinite(self.feature_map)):
            raise ValueError(f"frame {self.id}: feature map is not finite")


@dataclass(frozen=True, eq=False)
class Scene:
    landmarks: np.ndarray
    descriptors: np.ndarray
    frames: tuple[Frame, ...]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        lm = np.asarray(self.landmarks, dtype=np.float64)
        desc = np.asarray(self.descriptors, dtype=np.float64)
        if lm.ndim != 2 or lm.shape[1] != 3 or lm.shape[0] < 1:
            raise ValueError(f"landmarks must be (M >= 1, 3), got {lm.shape}")
        if desc.ndim != 2 or desc.shape[0] != lm.shape[0]:
            raise ValueError(f"descriptor rows ({desc.shape}) do not match landmarks ({lm.shape})")
        ids = [f.id for f in self.frames]
        if len(set(ids)) != len(ids):
            raise ValueError("frame ids must be unique")
        object.__setattr__(self, "landmarks", lm)
        object.__setattr__(self, "descriptors", desc)
        object.__setattr__(self, "frames", tuple(self.frames))
        object.__setattr__(self, "_index", {f.id: i for i, f in enumerate(self.frames)})

    @property
    def num_landmarks(self) -> int:
        return self.landmarks.shape[0]

    @property
    def grid(self) -> tuple[int, int]:
        fm = self.frames[0].feature_map
        return fm.shape[0], fm.shape[1]

    def frame(self, frame_id: str) -> Frame:
        try:
            return self.frames[self._index[frame_id]]
        except KeyError:
            raise KeyError(f"unknown frame id {frame_id!r}") from None

    def database(self) -> list[Frame]:
        return [f for f in self.frames if f.split == "database"]

    def queries(self) -> list[Frame]:
        return [f for f in self.frames if f.split == "query"]


@dataclass(frozen=True)
class SceneGenConfig:
    num_landmarks: int = 500
    num_database_frames: int = 32
    num_queries: int = 8
    camera_radius_range: tuple[float, float] = (1.5, 2.5)
    landmark_radius: float = 4.0
    fov_degrees: float = 60.0
    descriptor_dim: int = 8
    grid: tuple[int, int] = (4, 4)
    trap_fraction: float = 0.0
    look_jitter: float = 0.5
    roll_jitter_degrees: float = 10.0
    seed: int = 0

    def __post_init__(self):
        counts = {
            "num_landmarks": self.num_landmarks,
            "num_database_frames": self.num_database_frames,
            "num_queries": self.num_queries,
            "descriptor_dim": self.descriptor_dim - 1,
            "grid rows": self.grid[0],
            "grid cols": self.grid[1],
        }
        for name, value in counts.items():
            if value < 1:
                raise ValueError(f"{name} must be >= 1 (descriptor_dim >= 2), got {value}")
        if not 10.0 < self.fov_degrees < 170.0:
            raise ValueError(f"fov_degrees must lie in (10, 170), got {self.fov_degrees}")
        if not 0.0 <= self.trap_fraction <= 1.0:
            raise ValueError(f"trap_fraction must lie in [0, 1], got {self.trap_fraction}")
        lo, hi = self.camera_radius_range
        if not 0 < lo <= hi:
            raise ValueError(f"invalid camera_radius_range {self.camera_radius_range}")


def project(points: np.ndarray, pose: Pose, intr: Intrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Pinhole projection of world points; returns (uv, depth)."""
    cam = pose.transform(points)
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * cam[:, 0] / z + intr.cx
        v = intr.fy * cam[:, 1] / z + intr.cy
    return np.stack([u, v], axis=1), z


def visibility_mask(
    landmarks: np.ndarray, pose: Pose, intr: Intrinsics, grid: tuple[int, int]
) -> np.ndarray:
    """Landmarks in front of the camera whose projection lands inside the grid.

    This is the single visibility predicate shared by rendering, co-visibility
    and scene validation.
    """
    uv, z = project(landmarks, pose, intr)
    ph, pw = grid
    return (z > MIN_DEPTH) & (uv[:, 0] >= 0) & (uv[:, 0] < pw) & (uv[:, 1] >= 0) & (uv[:, 1] < ph)


def visible(scene: Scene, frame: Frame) -> np.ndarray:
    return visibility_mask(scene.landmarks, frame.pose, frame.intrinsics, frame.feature_map.shape[:2])


def render_features(
    landmarks: np.ndarray,
    descriptors: np.ndarray,
    pose: Pose,
    intr: Intrinsics,
    grid: tuple[int, int],
) -> np.ndarray:
    ph, pw = grid
    channels = descriptors.shape[1]
    fmap = np.zeros((ph, pw, channels))
    mask = visibility_mask(landmarks, pose, intr, grid)
    if not mask.any():
        return fmap
    uv, _ = project(landmarks[mask], pose, intr)
    cols = np.floor(uv[:, 0]).astype(int)
    rows = np.floor(uv[:, 1]).astype(int)
    counts = np.zeros((ph, pw))
    np.add.at(counts, (rows, cols), 1.0)
    np.add.at(fmap, (rows, cols), descriptors[mask])
    hit = counts > 0
    fmap[hit] /= counts[hit][:, None]
    fmap[..., -1] = counts / landmarks.shape[0]
    return fmap


def render_feature_map(scene: Scene, frame: Frame) -> np.ndarray:
    return render_features(
        scene.landmarks, scene.descriptors, frame.pose, frame.intrinsics, frame.feature_map.shape[:2]
    )


def _embed(mask: np.ndarray, projection: np.ndarray) -> np.ndarray:
    e = mask.astype(np.float64) @ projection
    n = np.linalg.norm(e)
    if n == 0:
        return e
    return e / n


def embedding_projection(num_landmarks: int, seed: int, dim: int = EMBEDDING_DIM) -> np.ndarray:
    rng = np.random.default_rng([seed, 0xE3B])
    return rng.standard_normal((num_landmarks, dim)) / math.sqrt(dim)


def _sample_shell_camera(rng, cfg: SceneGenConfig) -> Pose:
    d = rng.standard_normal(3)
    d /= np.linalg.norm(d)
    radius = rng.uniform(*cfg.camera_radius_range)
    center = radius * d
    target = rng.uniform(-cfg.look_jitter, cfg.look_jitter, size=3)
    pose = look_at(center, target)
    roll = rotation_about([0.0, 0.0, 1.0], rng.uniform(-cfg.roll_jitter_degrees, cfg.roll_jitter_degrees))
    return Pose.from_center(roll @ pose.R, center)


def _trap_camera(rng, query_pose: Pose) -> Pose:
    """Camera near the query's center facing the opposite way."""
    center = query_pose.center + rng.normal(scale=0.05, size=3)
    flip = rotation_about([0.0, 1.0, 0.0], 180.0)
    return Pose.from_center(flip @ query_pose.R, center)


def landmark_descriptors(landmarks: np.ndarray, dim: int, radius: float, rng) -> np.ndarray:
    """Descriptor rows: scaled position channels, random appearance, reserved zero.

    Cell-averaged random appearance alone washes out, so the first channels
    carry the landmark position to keep the rendered maps geometric.
    """
    M = len(landmarks)
    out = np.zeros((M, dim))
    n_pos = min(3, dim - 1)
    out[:, :n_pos] = landmarks[:, :n_pos] / radius
    out[:, n_pos : dim - 1] = 0.5 * rng.standard_normal((M, dim - 1 - n_pos))
    return out


def generate_scene(cfg: SceneGenConfig) -> Scene:
    """Sample a deterministic synthetic scene from ``cfg``.

    Landmarks are uniform in a ball; database and query cameras sit on a shell
    looking toward a jittered point near the origin. For a ``trap_fraction`` of
    the queries an opposite-facing database camera is placed next to the query.
    Frames that see no landmark (and queries without a database frame of
    co-visibility above 0.2) are resampled up to 100 times.
    """
    rng = np.random.default_rng(cfg.seed)
    grid = tuple(cfg.grid)
    M = cfg.num_landmarks
    if M == 1:
        landmarks = np.zeros((1, 3))
    else:
        d = rng.standard_normal((M, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        landmarks = d * cfg.landmark_radius * rng.uniform(size=(M, 1)) ** (1.0 / 3.0)
    descriptors = landmark_descriptors(landmarks, cfg.descriptor_dim, cfg.landmark_radius, rng)
    intr = Intrinsics.from_fov(cfg.fov_degrees, grid)

    def mask_of(pose):
        return visibility_mask(landmarks, pose, intr, grid)

    def sample_visible():
        for _ in range(MAX_FRAME_ATTEMPTS):
            pose = _sample_shell_camera(rng, cfg)
            m = mask_of(pose)
            if m.any():
                return pose, m
        raise RuntimeError(f"no camera with a visible landmark after {MAX_FRAME_ATTEMPTS} attempts")

    db = [sample_visible() for _ in range(cfg.num_database_frames)]

    queries = []
    for qi in range(cfg.num_queries):
        for _ in range(MAX_FRAME_ATTEMPTS):
            pose, m = sample_visible()
            n = m.sum()
            best = max((np.count_nonzero(m & dm) / n for _, dm in db), default=0.0)
            if best > MIN_QUERY_COVIS:
                queries.append((pose, m))
                break
        else:
            raise RuntimeError(
                f"query {qi}: no database frame with co-visibility > {MIN_QUERY_COVIS} "
                f"after {MAX_FRAME_ATTEMPTS} attempts"
            )

    n_traps = int(round(cfg.trap_fraction * cfg.num_queries))
    traps = []
    for qpose, _ in queries[:n_traps]:
        for _ in range(MAX_FRAME_ATTEMPTS):
            pose = _trap_camera(rng, qpose)
            m = mask_of(pose)
            if m.any():
                traps.append((pose, m))
                break
        else:
            raise RuntimeError(f"no visible trap camera after {MAX_FRAME_ATTEMPTS} attempts")

    projection = embedding_projection(M, cfg.seed)
    frames = []
    db_all = db + traps
    for i, (pose, m) in enumerate(db_all):
        frames.append(
            Frame(
                f"db-{i:04d}",
                pose,
                intr,
                render_features(landmarks, descriptors, pose, intr, grid),
                _embed(m, projection),
                "database",
            )
        )
    for i, (pose, m) in enumerate(queries):
        frames.append(
            Frame(
                f"q-{i:04d}",
                pose,
                intr,
                render_features(landmarks, descriptors, pose, intr, grid),
                _embed(m, projection),
                "query",
            )
        )
    meta = {"seed": cfg.seed, "generator_version": GENERATOR_VERSION, "convention": CONVENTION,
            "num_traps": n_traps}
    return Scene(landmarks, descriptors, tuple(frames), meta)


def expected_visible_count(
    cfg: SceneGenConfig, poses: Sequence[Pose], samples: int = 200_000, seed: int = 1
) -> float:
    """Monte-Carlo estimate of the mean visible-landmark count over ``poses``.

    Estimates, for each camera, the fraction of the landmark ball inside its
    frustum and multiplies by the number of landmarks.
    """
    rng = np.random.default_rng(seed)
    d = rng.standard_normal((samples, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    pts = d * cfg.landmark_radius * rng.uniform(size=(samples, 1)) ** (1.0 / 3.0)
    intr = Intrinsics.from_fov(cfg.fov_degrees, cfg.grid)
    fracs = [visibility_mask(pts, p, intr, cfg.grid).mean() for p in poses]
    return float(np.mean(fracs)) * cfg.num_landmarks


# --------------------------------------------------------------------------- io


def _frame_to_dict(f: Frame) -> dict:
    i = f.intrinsics
    return {
        "id": f.id,
        "split": f.split,
        "pose": f.pose.to_dict(),
        "intrinsics": {"fx": i.fx, "fy": i.fy, "cx": i.cx, "cy": i.cy},
        "feature_map": {"shape": list(f.feature_map.shape), "values": f.feature_map.ravel().tolist()},
        "embedding": f.embedding.tolist(),
    }


def scene_to_dict(scene: Scene) -> dict:
    return {
        "schema": SCENE_SCHEMA,
        "convention": scene.meta.get("convention", CONVENTION),
        "meta": {k: v for k, v in scene.meta.items() if k != "convention"},
        "landmarks": scene.landmarks.tolist(),
        "descriptors": scene.descriptors.tolist(),
        "frames": [_frame_to_dict(f) for f in scene.frames],
    }


def dumps_scene(scene: Scene) -> str:
    # float repr is the shortest string that round-trips exactly
    return json.dumps(scene_to_dict(scene), indent=1, allow_nan=False) + "\n"


def save_scene(scene: Scene, path) -> None:
    Path(path).write_text(dumps_scene(scene))


def _require(d: dict, key: str, where: str):
    if not isinstance(d, dict) or key not in d:
        raise SceneFormatError(f"{where}: missing field {key!r}")
    return d[key]


def _array(value, where: str, shape=None) -> np.ndarray:
    try:
        a = np.asarray(value, dtype=np.float64)
    except (TypeError, ValueError) as e:
        raise SceneFormatError(f"{where}: not a numeric array ({e})") from None
    if shape is not None and a.shape != tuple(shape):
        raise SceneFormatError(f"{where}: expected shape {tuple(shape)}, got {a.shape}")
    return a


def scene_from_dict(doc: dict) -> Scene:
    schema = _require(doc, "schema", "scene")
    if schema != SCENE_SCHEMA:
        raise SchemaVersionError(f"unsupported scene schema {schema!r} (expected {SCENE_SCHEMA!r})")
    convention = _require(doc, "convention", "scene")
    if convention != CONVENTION:
        raise SceneFormatError(f"scene: unsupported pose convention {convention!r}")
    meta = dict(doc.get("meta", {}))
    meta["convention"] = convention
    landmarks = _array(_require(doc, "landmarks", "scene"), "scene.landmarks")
    descriptors = _array(_require(doc, "descriptors", "scene"), "scene.descriptors")
    frames = []
    for i, fd in enumerate(_require(doc, "frames", "scene")):
        where = f"scene.frames[{i}]"
        try:
            pose = Pose.from_dict(_require(fd, "pose", where))
            intr = Intrinsics(**{k: float(_require(fd["intrinsics"], k, where + ".intrinsics"))
                                 for k in ("fx", "fy", "cx", "cy")})
            fm = _require(fd, "feature_map", where)
            shape = _require(fm, "shape", where + ".feature_map")
            values = _array(_require(fm, "values", where + ".feature_map"), where + ".feature_map.values")
            if values.size != int(np.prod(shape)):
                raise SceneFormatError(f"{where}.feature_map: {values.size} values for shape {shape}")
            frames.append(
                Frame(
                    str(_require(fd, "id", where)),
                    pose,
                    intr,
                    values.reshape(shape),
                    _array(_require(fd, "embedding", where), where + ".embedding"),
                    _require(fd, "split", where),
                )
            )
        except SceneFormatError:
            raise
        except (KeyError, TypeError, ValueError) as e:
            raise SceneFormatError(f"{where}: {e}") from None
    try:
        return Scene(landmarks, descriptors, tuple(frames), meta)
    except ValueError as e:
        raise SceneFormatError(f"scene: {e}") from None


def loads_scene(text: str) -> Scene:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise SceneFormatError(f"invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}") from None
    return scene_from_dict(doc)


def load_scene(path) -> Scene:
    return loads_scene(Path(path).read_text())


def with_frames(scene: Scene, frames: Sequence[Frame]) -> Scene:
    return replace(scene, frames=tuple(frames))
