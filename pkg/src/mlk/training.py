"""Loss, optimizer and training loops for the pose regressor.

The loss is an L1 term per output group (translation, rotation, focal) weighted
by learned homoscedastic uncertainties: ``sum_x loss_x * exp(-s_x) + s_x``.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .data import Scene, visibility_mask
from .geom import Pose, canonical_quat_array, flatten_pose, normalize_poses, relative_pose
from .regressor import CameraOutput, ModelConfig, PoseRegressor, decode_head

logger = logging.getLogger(__name__)

CURVE_FIELDS = ("step", "loss_c", "loss_q", "loss_f", "s_c", "s_q", "s_f", "total", "grad_norm")
MIN_REFERENCE_COVIS = 0.1


class TrainingDiverged(RuntimeError):
    """Raised when the loss becomes non-finite; carries a diagnostic record."""

    def __init__(self, record: dict):
        super().__init__(f"non-finite loss at step {record.get('step')}: {record}")
        self.record = record


@dataclass(frozen=True)
class TrainConfig:
    lr_initial: float = 1e-3
    lr_final: float = 1e-5
    decay: str = "cosine"
    steps: int = 5000
    batch_size: int = 8
    k_range: tuple[int, int] = (2, 8)
    seed: int = 0
    token_mode: str = "all_learnable"
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    pairwise: bool = False
    # the query frame's share of each loss term; None gives the plain mean over the k + 1 frames
    query_share: float | None = 0.5

    def __post_init__(self):
        object.__setattr__(self, "k_range", tuple(int(v) for v in self.k_range))
        object.__setattr__(self, "betas", tuple(float(v) for v in self.betas))
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr_initial == 0 and self.lr_final == 0:
            pass  # frozen run, used to check that nothing moves
        elif not self.lr_initial >= self.lr_final > 0:
            raise ValueError(f"need lr_initial >= lr_final > 0, got {self.lr_initial}, {self.lr_final}")
        lo, hi = self.k_range
        if not 1 <= lo <= hi:
            raise ValueError(f"invalid k_range {self.k_range}")
        if self.decay not in ("cosine", "linear", "constant"):
            raise ValueError(f"unknown decay {self.decay!r}")
        if self.query_share is not None and not 0.0 < self.query_share < 1.0:
            raise ValueError(f"query_share must lie in (0, 1), got {self.query_share}")

    def frame_weights(self, num_frames: int) -> np.ndarray | None:
        """Per-frame loss weights (summing to 1), or None for the plain mean."""
        if self.query_share is None or num_frames < 2:
            return None
        w = np.full(num_frames, (1.0 - self.query_share) / (num_frames - 1))
        w[-1] = self.query_share
        return w

    def learning_rate(self, step: int) -> float:
        if self.steps == 1 or self.decay == "constant":
            return self.lr_initial
        frac = step / (self.steps - 1)
        if self.decay == "linear":
            return self.lr_initial + (self.lr_final - self.lr_initial) * frac
        return self.lr_final + 0.5 * (self.lr_initial - self.lr_final) * (1 + math.cos(math.pi * frac))


@dataclass(frozen=True)
class LossBreakdown:
    loss_c: float
    loss_q: float
    loss_f: float
    s_c: float
    s_q: float
    s_f: float
    total: float

    def recomputed_total(self) -> float:
        return sum(
            l * math.exp(-s) + s
            for l, s in ((self.loss_c, self.s_c), (self.loss_q, self.s_q), (self.loss_f, self.s_f))
        )


# ------------------------------------------------------------------ losses


def component_loss_tensors(
    q_pred: torch.Tensor, c_pred: torch.Tensor, f_pred: torch.Tensor,
    q_gt: torch.Tensor, c_gt: torch.Tensor, f_gt: torch.Tensor,
    frame_weights: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Mean absolute errors per group over all frames and entries.

    Predicted quaternions are sign-flipped onto the ground-truth hemisphere
    first. ``frame_weights`` (one per frame, summing to 1) replaces the plain
    mean over frames with a weighted one.
    """
    sign = torch.where((q_pred * q_gt).sum(-1, keepdim=True) < 0, -1.0, 1.0).to(q_pred.dtype)
    per_frame = (
        (c_pred - c_gt).abs().mean(-1),
        (sign * q_pred - q_gt).abs().mean(-1),
        (f_pred - f_gt).abs().mean(-1),
    )
    if frame_weights is None:
        return tuple(e.mean() for e in per_frame)
    return tuple((e * frame_weights).sum(-1).mean() for e in per_frame)


def component_loss(pred: Sequence[CameraOutput], gt: Sequence[CameraOutput]) -> tuple[float, float, float]:
    if len(pred) != len(gt):
        raise ValueError(f"prediction has {len(pred)} frames, ground truth {len(gt)}")
    if not pred:
        raise ValueError("empty frame list")

    def stack(outs):
        q = torch.as_tensor(np.stack([np.asarray(o.q, dtype=np.float64) for o in outs]))
        c = torch.as_tensor(np.stack([np.asarray(o.c, dtype=np.float64) for o in outs]))
        f = torch.as_tensor(np.array([[o.fx, o.fy] for o in outs], dtype=np.float64))
        return q, c, f

    gq, gc, gf = stack(gt)
    gq = torch.as_tensor(np.stack([canonical_quat_array(q) for q in gq.numpy()]))
    losses = component_loss_tensors(*stack(pred), gq, gc, gf)
    return tuple(float(l) for l in losses)


def homoscedastic_total_tensor(losses, s: torch.Tensor) -> torch.Tensor:
    return sum(l * torch.exp(-s[i]) + s[i] for i, l in enumerate(losses))


def homoscedastic_total(losses: Sequence[float], s_values: Sequence[float]) -> LossBreakdown:
    losses = [float(v) for v in losses]
    s_values = [float(v) for v in s_values]
    if not all(map(math.isfinite, losses + s_values)):
        raise ValueError("losses and uncertainties must be finite")
    total = sum(l * math.exp(-s) + s for l, s in zip(losses, s_values))
    return LossBreakdown(*losses, *s_values, total)


def homoscedastic_grad(losses: Sequence[float], s_values: Sequence[float]) -> np.ndarray:
    """Analytic derivative of the total loss with respect to each ``s_x``."""
    return np.array([1.0 - l * math.exp(-s) for l, s in zip(losses, s_values)])


# ------------------------------------------------------------------ optimizer


class AdamW:
    """Adam with decoupled weight decay (Loshchilov & Hutter).

    Decay is applied to matrix-shaped parameters only.
    """

    def __init__(self, params: Iterable[torch.nn.Parameter], betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = [p for p in params if p.requires_grad]
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]

    @torch.no_grad()
    def step(self, lr: float) -> None:
        self.t += 1
        if lr == 0.0:
            return
        live = [i for i, p in enumerate(self.params) if p.grad is not None]
        params = [self.params[i] for i in live]
        grads = [p.grad for p in params]
        m = [self.m[i] for i in live]
        v = [self.v[i] for i in live]
        b1, b2 = self.beta1, self.beta2
        # the same update as a per-tensor loop, batched over tensors with torch's multi-tensor ops
        torch._foreach_mul_(m, b1)
        torch._foreach_add_(m, grads, alpha=1 - b1)
        torch._foreach_mul_(v, b2)
        torch._foreach_addcmul_(v, grads, grads, value=1 - b2)
        if self.weight_decay:
            decayed = [p for p in params if p.ndim >= 2]
            torch._foreach_mul_(decayed, 1 - lr * self.weight_decay)
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        denom = torch._foreach_sqrt(torch._foreach_div(v, c2))
        torch._foreach_add_(denom, self.eps)
        torch._foreach_addcdiv_(params, torch._foreach_div(m, c1), denom, value=-lr)


# ------------------------------------------------------------------ sampling


def _quat_mul_conj(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product ``a * conj(b)`` row by row; the quaternion of ``R_a R_b^T``."""
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    bx, by, bz = -bx, -by, -bz
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def _canonical_rows(q: np.ndarray) -> np.ndarray:
    """Flip each row onto the hemisphere whose first nonzero component is positive."""
    first = np.argmax(q != 0.0, axis=-1)
    lead = np.take_along_axis(q, first[..., None], axis=-1)
    return np.where(lead < 0.0, -q, q)


@dataclass
class SceneCache:
    """Per-scene arrays reused across training samples."""

    scene: Scene
    covis: np.ndarray
    fmaps: np.ndarray
    poses: list[Pose]
    focal: np.ndarray
    R: np.ndarray
    t: np.ndarray
    quats: np.ndarray
    ranked: np.ndarray  # row i: the other frames by descending covis with frame i, ties by index

    @classmethod
    def build(cls, scene: Scene) -> "SceneCache":
        masks = np.stack([visibility_mask(scene.landmarks, f.pose, f.intrinsics, f.feature_map.shape[:2])
                          for f in scene.frames]).astype(np.float64)
        inter = masks @ masks.T
        covis = inter / np.maximum(1.0, masks.sum(axis=1))[:, None]
        ph, pw = scene.grid
        focal = np.array([[f.intrinsics.fx / pw, f.intrinsics.fy / ph] for f in scene.frames])
        poses = [f.pose for f in scene.frames]
        n = len(poses)
        idx = np.arange(n)
        ranked = np.stack([[j for j in np.lexsort((idx, -covis[i])) if j != i] for i in range(n)]) if n > 1 \
            else np.zeros((n, 0), dtype=int)
        return cls(scene, covis, np.stack([f.feature_map for f in scene.frames]), poses, focal,
                   np.stack([p.R for p in poses]), np.stack([p.translation for p in poses]),
                   np.stack([np.asarray(p.rotation) for p in poses]), ranked)


@dataclass
class Batch:
    fmaps: torch.Tensor
    ref_flat: torch.Tensor
    q_gt: torch.Tensor
    c_gt: torch.Tensor
    f_gt: torch.Tensor


def choose_references(cache: SceneCache, query: int, k: int, rng: np.random.Generator) -> list[int]:
    """Random references among the ``2k`` most co-visible frames for ``query``.

    Drawing from the top of the co-visibility ranking keeps training close to
    what retrieval hands the model at test time; frames below
    ``MIN_REFERENCE_COVIS`` are only used when nothing better is left.
    """
    ranked = cache.ranked[query]
    top = ranked[: 2 * k]
    pool = top[cache.covis[query, top] > MIN_REFERENCE_COVIS]
    if len(pool) < k:
        pool = ranked[:k]
    return [int(pool[i]) for i in rng.permutation(len(pool))[:k]]


def sample_example(cache: SceneCache, query: int, refs: Sequence[int]):
    """Normalized inputs and per-frame targets for one (references, query) sample.

    Poses are expressed relative to the first reference and divided by the
    mean reference-center distance, as ``normalize_poses`` does at test time.
    """
    frames = np.array(list(refs) + [query])
    f0 = frames[0]
    R = cache.R[frames] @ cache.R[f0].T
    t = cache.t[frames] - R @ cache.t[f0]
    centers = -np.einsum("nji,nj->ni", R, t)
    s = float(np.mean(np.linalg.norm(centers[:-1], axis=1)))
    if s < 1e-9:
        s = 1.0
    t = t / s
    q = _canonical_rows(_quat_mul_conj(cache.quats[frames], cache.quats[f0][None]))
    flat = np.concatenate([R[:-1].reshape(-1, 9), t[:-1]], axis=1)
    return cache.fmaps[frames], flat, q, t, cache.focal[frames]


def sample_batch(caches: Sequence[SceneCache], k: int, batch_size: int, rng, dtype) -> Batch:
    parts = []
    for _ in range(batch_size):
        cache = caches[rng.integers(len(caches))]
        query = int(rng.integers(len(cache.poses)))
        parts.append(sample_example(cache, query, choose_references(cache, query, k, rng)))
    cols = [torch.as_tensor(np.stack(col)).to(dtype) for col in zip(*parts)]
    return Batch(*cols)


# ------------------------------------------------------------------ loop


@dataclass
class TrainResult:
    model: PoseRegressor
    curve: list[dict] = field(default_factory=list)

    @property
    def losses(self) -> np.ndarray:
        return np.array([r["total"] for r in self.curve])

    @property
    def grad_norms(self) -> np.ndarray:
        return np.array([r["grad_norm"] for r in self.curve])


def loss_on_batch(model: PoseRegressor, batch: Batch, frame_weights: np.ndarray | None = None):
    q, c, f = model(batch.fmaps, batch.ref_flat)
    w = None if frame_weights is None else torch.as_tensor(frame_weights).to(q.dtype)
    losses = component_loss_tensors(q, c, f, batch.q_gt, batch.c_gt, batch.f_gt, w)
    return homoscedastic_total_tensor(losses, model.log_vars), losses


def _grad_norm(params) -> float:
    sq = 0.0
    for p in params:
        if p.grad is not None:
            sq += float((p.grad.double() ** 2).sum())
    return math.sqrt(sq)


def train(model: PoseRegressor, scenes: Sequence[Scene], cfg: TrainConfig, log_every: int = 0) -> TrainResult:
    """Train ``model`` in place on samples drawn from ``scenes``.

    Every step draws one k for the whole batch, samples a query and k
    co-visible references per example, normalizes poses relative to the first
    reference and takes one AdamW step on all parameters, including the loss
    uncertainties. Returns the model and the per-step loss curve.
    """
    if not scenes:
        raise ValueError("training needs at least one scene")
    if cfg.token_mode != model.config.token_mode:
        raise ValueError(f"train config token_mode {cfg.token_mode!r} != model {model.config.token_mode!r}")
    caches = [SceneCache.build(s) for s in scenes]
    rng = np.random.default_rng([cfg.seed, 0x7A11])
    opt = AdamW(model.parameters(), cfg.betas, cfg.eps, cfg.weight_decay)
    lo, hi = (1, 1) if cfg.pairwise else cfg.k_range
    result = TrainResult(model)
    model.train()
    for step in range(cfg.steps):
        k = int(rng.integers(lo, hi + 1))
        batch = sample_batch(caches, k, cfg.batch_size, rng, model.dtype)
        for p in model.parameters():
            p.grad = None
        total, losses = loss_on_batch(model, batch, cfg.frame_weights(k + 1))
        s = model.log_vars.detach().double().numpy()
        record = {
            "step": step,
            "loss_c": float(losses[0].detach()),
            "loss_q": float(losses[1].detach()),
            "loss_f": float(losses[2].detach()),
            "s_c": float(s[0]),
            "s_q": float(s[1]),
            "s_f": float(s[2]),
            "total": float(total.detach()),
        }
        if not math.isfinite(record["total"]):
            total.backward()
            record["grad_norm"] = _grad_norm(model.parameters())
            raise TrainingDiverged(record)
        total.backward()
        record["grad_norm"] = _grad_norm(model.parameters())
        opt.step(cfg.learning_rate(step))
        result.curve.append(record)
        if log_every and step % log_every == 0:
            logger.info("step %d total %.4f grad %.3f", step, record["total"], record["grad_norm"])
    model.eval()
    return result


def pairwise_baseline(model: PoseRegressor, scenes: Sequence[Scene], cfg: TrainConfig, **kw) -> TrainResult:
    """Same loop with one reference per sample and no reference pose encoding.

    ``model`` must have been built with ``use_pose_tokens=False``.
    """
    if model.config.use_pose_tokens:
        raise ValueError("pairwise baseline needs a model built with use_pose_tokens=False")
    return train(model, scenes, replace(cfg, pairwise=True), **kw)


def pairwise_model_config(config: ModelConfig) -> ModelConfig:
    return replace(config, use_pose_tokens=False)


def smoothed(values: Sequence[float], window: int = 50) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        window = max(1, len(v))
    kernel = np.ones(window) / window
    return np.convolve(v, kernel, mode="valid")


def write_curve(curve: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CURVE_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in curve:
            w.writerow({k: row[k] for k in CURVE_FIELDS})


def read_curve(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]
