"""Pose-error metrics, query localization and the benchmark harness."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np
import torch

from .data import Frame, Scene, visible
from .geom import (
    Pose,
    exp_so3,
    flatten_pose,
    normalize_poses,
    relative_pose,
    rotation_angle_error,
    translation_angle_error,
)
from .regressor import PoseRegressor, decode_head
from .retrieval import RetrievalStrategy, retrieve
from .scale_recovery import (
    DegenerateGeometry,
    ScaleMethod,
    absolute_pose_motion_avg,
    absolute_pose_umeyama,
)

REPORT_SCHEMA = "mlk-report/1"
AUC_THRESHOLDS = (5.0, 10.0, 20.0)
RECORD_FIELDS = (
    "query_id", "estimator", "method", "k", "retrieval",
    "trans_err_units", "rot_err_deg", "trans_err_deg", "wall_time_ms", "failed", "error",
)


# ------------------------------------------------------------------ metrics


@dataclass(frozen=True)
class PairError:
    rot_deg: float
    trans_deg: float

    def __post_init__(self):
        if not (self.rot_deg >= 0 and self.trans_deg >= 0):
            raise ValueError(f"angular errors must be non-negative, got {self.rot_deg}, {self.trans_deg}")

    @property
    def combined(self) -> float:
        return max(self.rot_deg, self.trans_deg)


def _combined(errors) -> np.ndarray:
    return np.array([e.combined if isinstance(e, PairError) else float(e) for e in errors], dtype=np.float64)


def pose_auc(errors: Sequence[PairError], thresholds: Sequence[float] = AUC_THRESHOLDS) -> list[float]:
    """Normalized area under the recall curve up to each threshold.

    ``AUC(θ) = (1/θ) ∫_0^θ recall(e) de`` with ``recall(e)`` the fraction of
    pairs whose combined error is at most ``e``. Each pair with error ``e_j < θ``
    contributes ``(θ - e_j) / (n θ)``.
    """
    e = _combined(errors)
    if e.size == 0:
        raise ValueError("pose_auc needs at least one error")
    th = [float(t) for t in thresholds]
    if any(t <= 0 for t in th) or any(b < a for a, b in zip(th, th[1:])):
        raise ValueError(f"thresholds must be positive and ascending, got {thresholds}")
    n = e.size
    return [float(np.sum(np.clip(t - e, 0.0, None)) / (n * t)) for t in th]


def recall_at(errors: Sequence[PairError], thresholds: Sequence[float] = AUC_THRESHOLDS) -> list[float]:
    e = _combined(errors)
    if e.size == 0:
        raise ValueError("recall_at needs at least one error")
    return [float(np.mean(e <= t)) for t in thresholds]


def median_errors(records: Sequence) -> tuple[float, float]:
    """Median translation error and median rotation error.

    Accepts ``QueryRecord`` objects or ``(trans, rot)`` pairs.
    """
    if len(records) == 0:
        raise ValueError("median_errors needs at least one record")
    pairs = [(r.trans_err_units, r.rot_err_deg) if hasattr(r, "rot_err_deg") else tuple(r) for r in records]
    a = np.array(pairs, dtype=np.float64)
    return _median(a[:, 0]), _median(a[:, 1])


def _median(v: np.ndarray) -> float:
    v = np.sort(v)
    n = v.size
    mid = n // 2
    if n % 2:
        return float(v[mid])
    lo, hi = v[mid - 1], v[mid]
    if math.isinf(lo) or math.isinf(hi):
        return math.inf
    return float((lo + hi) / 2.0)


# ------------------------------------------------------------------ estimators


@dataclass
class RelativeEstimate:
    """Output of a relative-pose estimator for one query.

    ``rel_poses[i]`` maps reference ``i``'s camera frame into the query camera
    frame (arbitrary scale). ``ref_poses``/``query_pose`` are the predictions
    in a shared frame anchored at the first reference, when available.
    """

    rel_poses: list[Pose]
    ref_poses: list[Pose] | None = None
    query_pose: Pose | None = None


class RelativePoseEstimator(Protocol):
    name: str

    def estimate(self, scene: Scene, query: Frame, refs: Sequence[Frame]) -> RelativeEstimate: ...


def normalized_reference_poses(refs: Sequence[Frame]) -> tuple[list[Pose], float]:
    first = refs[0].pose
    return normalize_poses([relative_pose(first, f.pose) for f in refs])


def _joint(ref_poses: Sequence[Pose], query_pose: Pose) -> RelativeEstimate:
    rel = [relative_pose(p, query_pose) for p in ref_poses]
    return RelativeEstimate(rel, list(ref_poses), query_pose)


class OracleEstimator:
    """Ground-truth relative poses, used to check the geometry end to end."""

    name = "oracle"

    def estimate(self, scene, query, refs):
        ref_norm, s = normalized_reference_poses(refs)
        q = relative_pose(refs[0].pose, query.pose)
        return _joint(ref_norm, Pose(q.rotation, q.translation / s))


def _perturb(pose: Pose, rng, rot_sigma: float, dir_sigma: float) -> Pose:
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    R = exp_so3(axis * math.radians(rng.normal(0.0, rot_sigma))) @ pose.R
    t = pose.translation
    n = np.linalg.norm(t)
    if n > 0 and dir_sigma > 0:
        perp = np.cross(t / n, rng.standard_normal(3))
        perp /= np.linalg.norm(perp)
        t = exp_so3(perp * math.radians(rng.normal(0.0, dir_sigma))) @ t
    return Pose.from_rt(R, t)


class NoisyOracleEstimator:
    """Ground-truth per-frame poses corrupted by seeded angular noise.

    Every predicted frame (references and query) receives a random rotation of
    ``N(0, rot_sigma)`` degrees about a random axis and its translation is
    turned by ``N(0, dir_sigma)`` degrees. With ``covis_scaled`` the sigmas of
    reference ``i`` are divided by ``max(covis(query, ref_i), covis_floor)`` and
    the query's by the mean co-visibility of the reference set, so poorly
    overlapping references yield worse estimates.
    """

    name = "oracle_noise"

    def __init__(self, rot_sigma: float = 2.0, dir_sigma: float = 2.0, covis_scaled: bool = True,
                 covis_floor: float = 0.05, seed: int = 0):
        self.rot_sigma = rot_sigma
        self.dir_sigma = dir_sigma
        self.covis_scaled = covis_scaled
        self.covis_floor = covis_floor
        self.seed = seed

    def _rng(self, query_id: str, ref_ids: Sequence[str]) -> np.random.Generator:
        key = zlib.crc32(("|".join([query_id, *ref_ids])).encode())
        return np.random.default_rng([self.seed, key])

    def estimate(self, scene, query, refs):
        truth = OracleEstimator().estimate(scene, query, refs)
        rng = self._rng(query.id, [f.id for f in refs])
        if self.covis_scaled:
            vq = visible(scene, query)
            n = max(1, np.count_nonzero(vq))
            cov = np.array([np.count_nonzero(vq & visible(scene, f)) / n for f in refs])
            gain = 1.0 / np.maximum(cov, self.covis_floor)
            q_gain = 1.0 / max(float(cov.mean()), self.covis_floor)
        else:
            gain = np.ones(len(refs))
            q_gain = 1.0
        refs_pred = [_perturb(p, rng, self.rot_sigma * g, self.dir_sigma * g) for p, g in zip(truth.ref_poses, gain)]
        query_pred = _perturb(truth.query_pose, rng, self.rot_sigma * q_gain, self.dir_sigma * q_gain)
        return _joint(refs_pred, query_pred)


class NetworkEstimator:
    """Joint forward pass over all references plus the query."""

    name = "network"

    def __init__(self, model: PoseRegressor):
        self.model = model

    def estimate(self, scene, query, refs):
        ref_norm, _ = normalized_reference_poses(refs)
        m = self.model
        fmaps = torch.as_tensor(np.stack([f.feature_map for f in refs] + [query.feature_map])).to(m.dtype)[None]
        flat = torch.as_tensor(np.stack([flatten_pose(p) for p in ref_norm])).to(m.dtype)[None]
        with torch.no_grad():
            q, c, _ = m(fmaps, flat)
        poses = _poses(q[0], c[0])
        return _joint(poses[:-1], poses[-1])


class PairwiseEstimator:
    """One (reference, query) pair per forward pass, as pair-only regressors do.

    No shared frame exists across pairs, so only ``rel_poses`` is filled.
    """

    name = "pairwise"

    def __init__(self, model: PoseRegressor):
        self.model = model

    def estimate(self, scene, query, refs):
        m = self.model
        fmaps = torch.as_tensor(np.stack([np.stack([f.feature_map, query.feature_map]) for f in refs])).to(m.dtype)
        flat = torch.as_tensor(np.tile(flatten_pose(Pose.identity()), (len(refs), 1, 1))).to(m.dtype)
        with torch.no_grad():
            q, c, _ = m(fmaps, flat)
        rel = []
        for i in range(len(refs)):
            ref_pred, query_pred = _poses(q[i], c[i])
            rel.append(relative_pose(ref_pred, query_pred))
        return RelativeEstimate(rel)


def _poses(q: torch.Tensor, c: torch.Tensor) -> list[Pose]:
    q = q.double().numpy()
    c = c.double().numpy()
    return [Pose(qi / np.linalg.norm(qi), ci) for qi, ci in zip(q, c)]


def estimator_for(model: PoseRegressor) -> RelativePoseEstimator:
    return NetworkEstimator(model) if model.config.use_pose_tokens else PairwiseEstimator(model)


# ------------------------------------------------------------------ localization


def localize_query(
    scene: Scene,
    query_frame: str,
    estimator,
    k: int,
    retrieval_strategy="covis",
    scale_method="motion_averaging",
) -> tuple[Pose, dict]:
    """Retrieve references, estimate relative poses and recover the absolute pose.

    ``estimator`` is a relative-pose estimator or a ``PoseRegressor``.
    Raises DegenerateGeometry (with the query id) when the references cannot
    determine the pose, including ``k`` below the method's minimum.
    """
    if isinstance(estimator, PoseRegressor):
        estimator = estimator_for(estimator)
    strategy = RetrievalStrategy.parse(retrieval_strategy) if isinstance(retrieval_strategy, str) else retrieval_strategy
    method = ScaleMethod.parse(scale_method) if isinstance(scale_method, str) else scale_method
    if k < method.min_references:
        raise DegenerateGeometry(
            f"query {query_frame}: {method.value} needs k >= {method.min_references}, got {k}"
        )
    query = scene.frame(query_frame)
    t0 = time.perf_counter()
    result = retrieve(scene, query_frame, k, strategy)
    refs = [scene.frame(i) for i in result.frame_ids]
    t1 = time.perf_counter()
    est = estimator.estimate(scene, query, refs)
    t2 = time.perf_counter()
    ref_world = [f.pose for f in refs]
    try:
        if method is ScaleMethod.MOTION_AVERAGING:
            out = absolute_pose_motion_avg(ref_world, est.rel_poses)
        else:
            if est.ref_poses is None or est.query_pose is None:
                raise DegenerateGeometry(f"{estimator.name} estimates share no common frame; Umeyama needs one")
            out = absolute_pose_umeyama(ref_world, est.ref_poses, est.query_pose)
    except DegenerateGeometry as e:
        raise DegenerateGeometry(f"query {query_frame}: {e}") from e
    t3 = time.perf_counter()
    diagnostics = {
        "references": list(result.frame_ids),
        "scores": list(result.scores),
        "residual": out.residual,
        "num_candidates": out.num_candidates,
        "timing_ms": {
            "retrieval": 1e3 * (t1 - t0),
            "estimate": 1e3 * (t2 - t1),
            "scale": 1e3 * (t3 - t2),
        },
    }
    return out.pose, diagnostics


# ------------------------------------------------------------------ benchmark


@dataclass(frozen=True)
class BenchmarkGrid:
    k_values: tuple[int, ...] = (10,)
    strategies: tuple[str, ...] = ("covis_oracle",)
    methods: tuple[str, ...] = ("motion_averaging",)

    def __post_init__(self):
        object.__setattr__(self, "k_values", tuple(int(k) for k in self.k_values))
        object.__setattr__(
            self, "strategies", tuple(RetrievalStrategy.parse(s).value for s in self.strategies)
        )
        object.__setattr__(self, "methods", tuple(ScaleMethod.parse(m).value for m in self.methods))
        if not self.k_values or not self.strategies or not self.methods:
            raise ValueError("every grid axis needs at least one value")
        if min(self.k_values) < 1:
            raise ValueError(f"k values must be positive, got {self.k_values}")

    def cells(self):
        for k in self.k_values:
            for s in self.strategies:
                for m in self.methods:
                    yield k, s, m


@dataclass
class QueryRecord:
    query_id: str
    estimator: str
    method: str
    k: int
    retrieval: str
    trans_err_units: float
    rot_err_deg: float
    trans_err_deg: float
    wall_time_ms: float = 0.0
    failed: bool = False
    error: str = ""

    @property
    def pair_error(self) -> PairError:
        return PairError(self.rot_err_deg, self.trans_err_deg)


def query_errors(scene: Scene, query: Frame, estimate: Pose, anchor: Frame) -> tuple[float, float, float]:
    """(center distance, rotation angle, translation-direction angle) against ground truth.

    The direction error compares the query's translation relative to ``anchor``.
    """
    trans = float(np.linalg.norm(estimate.center - query.pose.center))
    rot = rotation_angle_error(estimate.R, query.pose.R)
    t_gt = relative_pose(anchor.pose, query.pose).translation
    t_est = relative_pose(anchor.pose, estimate).translation
    return trans, rot, translation_angle_error(t_est, t_gt)


def evaluate_query(scene, query_id, estimator, k, strategy, method, record_timing=True) -> QueryRecord:
    t0 = time.perf_counter()
    try:
        pose, diag = localize_query(scene, query_id, estimator, k, strategy, method)
    except DegenerateGeometry as e:
        elapsed = 1e3 * (time.perf_counter() - t0) if record_timing else 0.0
        return QueryRecord(query_id, estimator.name, method, k, strategy, math.inf, math.inf, math.inf,
                           elapsed, True, str(e))
    elapsed = 1e3 * (time.perf_counter() - t0) if record_timing else 0.0
    anchor = scene.frame(diag["references"][0])
    trans, rot, tdeg = query_errors(scene, scene.frame(query_id), pose, anchor)
    return QueryRecord(query_id, estimator.name, method, k, strategy, trans, rot, tdeg, elapsed)


def cell_key(r: QueryRecord) -> tuple:
    return (r.estimator, r.k, r.retrieval, r.method)


def aggregate(records: Sequence[QueryRecord]) -> list[dict]:
    groups: dict[tuple, list[QueryRecord]] = {}
    for r in records:
        groups.setdefault(cell_key(r), []).append(r)
    rows = []
    for key, recs in groups.items():
        mt, mr = median_errors(recs)
        errs = [r.pair_error for r in recs]
        auc = pose_auc(errs)
        rec = recall_at(errs)
        times = [r.wall_time_ms for r in recs]
        row = {
            "estimator": key[0], "k": key[1], "retrieval": key[2], "method": key[3],
            "num_queries": len(recs),
            "failures": sum(r.failed for r in recs),
            "median_trans_units": mt,
            "median_rot_deg": mr,
            "median_wall_time_ms": float(np.median(times)),
        }
        for t, a, c in zip(AUC_THRESHOLDS, auc, rec):
            row[f"auc@{t:g}"] = a
            row[f"recall@{t:g}"] = c
        rows.append(row)
    return rows


@dataclass
class EvalReport:
    records: list[QueryRecord]
    aggregates: list[dict]
    config: dict = field(default_factory=dict)
    seed: int = 0

    @property
    def failures(self) -> int:
        return sum(r.failed for r in self.records)

    def cell(self, **match) -> dict:
        for row in self.aggregates:
            if all(row[k] == v for k, v in match.items()):
                return row
        raise KeyError(f"no aggregate row matching {match}")

    def records_for(self, **match) -> list[QueryRecord]:
        return [r for r in self.records if all(getattr(r, k) == v for k, v in match.items())]


def eval_threads() -> int:
    try:
        return max(1, int(os.environ.get("MLK_THREADS", "1")))
    except ValueError:
        return 1


def run_benchmark(
    scene: Scene,
    estimators,
    grid: BenchmarkGrid,
    queries: Sequence[str] | None = None,
    seed: int = 0,
    record_timing: bool = True,
    threads: int | None = None,
    config: Mapping | None = None,
) -> EvalReport:
    """Localize every query under every grid cell and aggregate the errors.

    Each query in a cell is timed end to end as one pass (retrieval, joint
    estimation, scale recovery). Failures are recorded as infinite errors.
    """
    if isinstance(estimators, PoseRegressor):
        estimators = [estimator_for(estimators)]
    elif not isinstance(estimators, (list, tuple)):
        estimators = [estimators]
    queries = list(queries) if queries is not None else [f.id for f in scene.queries()]
    if not queries:
        raise ValueError("scene has no query frames")
    jobs = [(est, k, s, m, q) for est in estimators for k, s, m in grid.cells() for q in queries]
    threads = threads or eval_threads()

    def run(job):
        est, k, s, m, q = job
        return evaluate_query(scene, q, est, k, s, m, record_timing)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(run, jobs))
    else:
        records = [run(j) for j in jobs]
    cfg = {
        "grid": {"k_values": list(grid.k_values), "strategies": list(grid.strategies), "methods": list(grid.methods)},
        "estimators": [e.name for e in estimators],
        "queries": queries,
        "scene_seed": scene.meta.get("seed"),
    }
    if config:
        cfg.update(config)
    return EvalReport(records, aggregate(records), cfg, seed)


# ------------------------------------------------------------------ report io


class ReportError(ValueError):
    pass


def _finite_or_none(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def _from_none(v):
    return math.inf if v is None else v


def report_to_dict(report: EvalReport) -> dict:
    return {
        "schema": REPORT_SCHEMA,
        "seed": report.seed,
        "config": report.config,
        "failures": report.failures,
        "aggregates": [{k: _finite_or_none(v) for k, v in row.items()} for row in report.aggregates],
        "records": [{k: _finite_or_none(v) for k, v in asdict(r).items()} for r in report.records],
    }


def records_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_FIELDS)
    for r in report.records:
        w.writerow([getattr(r, f) for f in RECORD_FIELDS])
    return buf.getvalue()


def aggregates_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    if report.aggregates:
        fields = list(report.aggregates[0])
        w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        w.writerows(report.aggregates)
    return buf.getvalue()


def write_report(report: EvalReport, outdir, figures: bool = True) -> dict[str, Path]:
    """Write ``report.json``, ``records.csv``, ``aggregates.csv`` and figures."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = {
        "json": outdir / "report.json",
        "records": outdir / "records.csv",
        "aggregates": outdir / "aggregates.csv",
    }
    paths["json"].write_text(json.dumps(report_to_dict(report), indent=1, allow_nan=False) + "\n")
    paths["records"].write_text(records_csv(report))
    paths["aggregates"].write_text(aggregates_csv(report))
    if figures:
        from .plotting import render_report_figures

        paths.update(render_report_figures(report, outdir / "figures"))
    return paths


def report_from_dict(doc: dict, verify: bool = True) -> EvalReport:
    if doc.get("schema") != REPORT_SCHEMA:
        raise ReportError(f"unsupported report schema {doc.get('schema')!r}")
    records = [QueryRecord(**{k: _from_none(v) if k in ("trans_err_units", "rot_err_deg", "trans_err_deg") else v
                              for k, v in r.items()}) for r in doc["records"]]
    stored = [{k: _from_none(v) for k, v in row.items()} for row in doc["aggregates"]]
    report = EvalReport(records, stored, doc.get("config", {}), doc.get("seed", 0))
    if verify:
        fresh = aggregate(records)
        if len(fresh) != len(stored):
            raise ReportError("aggregate rows do not match the per-query records")
        for a, b in zip(fresh, stored):
            for key, v in a.items():
                w = b.get(key)
                same = (v == w) or (isinstance(v, float) and isinstance(w, float) and math.isclose(v, w, rel_tol=1e-12, abs_tol=1e-12))
                if not same:
                    raise ReportError(f"aggregate {key} = {w} disagrees with recomputed {v}")
    return report


def load_report(path) -> EvalReport:
    return report_from_dict(json.loads(Path(path).read_text()))
