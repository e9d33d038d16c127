"""Multi-view pose-guided relative pose regressor.

Each of the ``k + 1`` input frames contributes one pose token, a few register
tokens and one patch token per feature-map cell. Reference pose tokens are a
learnable per-slot token plus an MLP encoding of the flattened reference pose;
the query (last frame) gets the learnable token alone. A stack of
alternating-attention blocks first attends within each frame, re-adds the pose
encodings to the pose-token rows, then attends across all frames. A small
attention head turns the final pose-token rows into a quaternion, a
translation and two focal lengths per frame, all relative to the first frame
at normalized scale.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .geom import Pose, Quaternion, flatten_pose

CHECKPOINT_FORMAT = "mlk-checkpoint/1"
TOKEN_MODES = ("all_learnable", "last_only")
PATCH_PROJECTIONS = ("per_cell", "shared")
_DTYPES = {"float64": torch.float64, "float32": torch.float32}


@dataclass(frozen=True)
class ModelConfig:
    token_dim: int = 32
    num_blocks: int = 2
    num_heads: int = 4
    patch_grid: tuple[int, int] = (4, 4)
    feature_channels: int = 8
    num_register_tokens: int = 2
    token_mode: str = "all_learnable"
    seed: int = 0
    k_max: int = 16
    pose_hidden: int = 0
    ff_mult: int = 2
    head_layers: int = 4
    use_pose_tokens: bool = True
    dtype: str = "float32"
    # per_cell: every grid cell has its own C -> d matrix; shared: one matrix for all cells
    patch_projection: str = "per_cell"

    def __post_init__(self):
        object.__setattr__(self, "patch_grid", tuple(int(v) for v in self.patch_grid))
        if self.token_dim < 1 or self.num_heads < 1 or self.token_dim % self.num_heads:
            raise ValueError(f"token_dim {self.token_dim} must be a positive multiple of num_heads {self.num_heads}")
        if self.num_blocks < 1:
            raise ValueError(f"num_blocks must be >= 1, got {self.num_blocks}")
        if min(self.patch_grid) < 1 or self.feature_channels < 1:
            raise ValueError("patch_grid and feature_channels must be positive")
        if self.num_register_tokens < 0:
            raise ValueError("num_register_tokens must be non-negative")
        if self.token_mode not in TOKEN_MODES:
            raise ValueError(f"token_mode must be one of {TOKEN_MODES}, got {self.token_mode!r}")
        if self.patch_projection not in PATCH_PROJECTIONS:
            raise ValueError(f"patch_projection must be one of {PATCH_PROJECTIONS}, got {self.patch_projection!r}")
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {tuple(_DTYPES)}")

    @property
    def num_patches(self) -> int:
        return self.patch_grid[0] * self.patch_grid[1]

    @property
    def tokens_per_frame(self) -> int:
        return 1 + self.num_register_tokens + self.num_patches

    @property
    def torch_dtype(self) -> torch.dtype:
        return _DTYPES[self.dtype]

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass(frozen=True)
class CameraOutput:
    """Per-frame regression: rotation, translation (normalized scale), focal lengths.

    Focal lengths are expressed in units of the grid extent (``fx / P_w``,
    ``fy / P_h``).
    """

    q: Quaternion
    c: np.ndarray
    fx: float
    fy: float

    @property
    def pose(self) -> Pose:
        return Pose(self.q, self.c)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.q), self.c, [self.fx, self.fy]])


@dataclass
class TokenSet:
    pose_tokens: np.ndarray
    register_tokens: np.ndarray
    patch_tokens: np.ndarray

    def __post_init__(self):
        n = self.pose_tokens.shape[0]
        if self.register_tokens.shape[0] != n or self.patch_tokens.shape[0] != n:
            raise ValueError("token groups disagree on the frame count")

    @property
    def num_frames(self) -> int:
        return self.pose_tokens.shape[0]

    def stacked(self) -> np.ndarray:
        """``[g, r, f]`` per frame: shape (frames, 1 + R + P, d)."""
        return np.concatenate([self.pose_tokens[:, None], self.register_tokens, self.patch_tokens], axis=1)

    @classmethod
    def from_stacked(cls, t: np.ndarray, num_registers: int) -> "TokenSet":
        return cls(t[:, 0], t[:, 1 : 1 + num_registers], t[:, 1 + num_registers :])


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        *lead, n, d = x.shape
        h = self.heads
        qkv = self.qkv(x).reshape(*lead, n, 3, h, d // h).movedim(-3, 0).transpose(-2, -3)
        q, k, v = qkv[0], qkv[1], qkv[2]
        # softmax(q k^T / sqrt(d_head)) v, via torch's fused kernel
        out = F.scaled_dot_product_attention(q, k, v).transpose(-2, -3).reshape(*lead, n, d)
        return self.proj(out)


class FeedForward(nn.Module):
    def __init__(self, dim: int, mult: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, mult * dim)
        self.fc2 = nn.Linear(mult * dim, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class Layer(nn.Module):
    """Pre-norm attention + feed-forward, both residual."""

    def __init__(self, dim: int, heads: int, mult: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim, mult)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.ff(self.norm2(x))


class AABlock(nn.Module):
    """Frame attention, pose re-injection, then global attention."""

    def __init__(self, dim: int, heads: int, mult: int):
        super().__init__()
        self.frame = Layer(dim, heads, mult)
        self.glob = Layer(dim, heads, mult)

    def forward(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        # x: (B, F, N, d); y: (B, F, d) with zeros for the query
        b, f, n, d = x.shape
        x = self.frame(x)
        x = torch.cat([(x[:, :, 0] + y).unsqueeze(2), x[:, :, 1:]], dim=2)
        return self.glob(x.reshape(b, f * n, d)).reshape(b, f, n, d)


class CameraHead(nn.Module):
    def __init__(self, dim: int, heads: int, mult: int, layers: int):
        super().__init__()
        self.layers = nn.ModuleList([Layer(dim, heads, mult) for _ in range(layers)])
        self.norm = nn.LayerNorm(dim)
        self.out = nn.Linear(dim, 9)

    def forward(self, rows: torch.Tensor) -> torch.Tensor:
        for layer in self.layers:
            rows = layer(rows)
        return self.out(self.norm(rows))


def decode_head(raw: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Split head output into (unit quaternion, translation, positive focals).

    The quaternion is normalized after adding the identity, so an all-zero
    output decodes to the identity rotation; focals go through softplus.
    """
    ident = torch.zeros(4, dtype=raw.dtype, device=raw.device)
    ident[0] = 1.0
    q = raw[..., :4] + ident
    q = q / q.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    return q, raw[..., 4:7], F.softplus(raw[..., 7:9])


class PoseRegressor(nn.Module):
    """All trainable weights of the regressor, including the loss uncertainties."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.token_dim
        hidden = config.pose_hidden or d
        self.pose_mlp = nn.Sequential(nn.Linear(12, hidden), nn.GELU(), nn.Linear(hidden, d))
        if config.patch_projection == "per_cell":
            self.patch_proj = nn.Parameter(torch.zeros(config.num_patches, d, config.feature_channels))
        else:
            self.patch_proj = nn.Linear(config.feature_channels, d)
        self.pos_embed = nn.Parameter(torch.zeros(config.num_patches, d))
        self.cam_tokens = nn.Parameter(torch.zeros(config.k_max + 1, d))
        self.register_tokens = nn.Parameter(torch.zeros(config.num_register_tokens, d))
        self.blocks = nn.ModuleList(
            [AABlock(d, config.num_heads, config.ff_mult) for _ in range(config.num_blocks)]
        )
        self.head = CameraHead(d, config.num_heads, config.ff_mult, config.head_layers)
        # homoscedastic uncertainties (s_c, s_q, s_f)
        self.log_vars = nn.Parameter(torch.zeros(3))
        self.to(config.torch_dtype)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        g = torch.Generator().manual_seed(self.config.seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("bias") or name == "log_vars":
                    p.zero_()
                elif "norm" in name:
                    p.fill_(1.0)
                else:
                    fan_in = p.shape[-1] if p.ndim > 1 else 1
                    std = 0.02 if name in ("pos_embed", "cam_tokens", "register_tokens") else 1 / math.sqrt(fan_in)
                    p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64) * std)

    @property
    def dtype(self) -> torch.dtype:
        return self.config.torch_dtype

    # ---------------------------------------------------------------- tokens

    def encode_poses(self, flat: torch.Tensor) -> torch.Tensor:
        return self.pose_mlp(flat)

    def embed_patches(self, fmaps: torch.Tensor) -> torch.Tensor:
        """(..., P_h, P_w, C) -> (..., P_h * P_w, d), row-major over cells."""
        cfg = self.config
        if tuple(fmaps.shape[-3:]) != (*cfg.patch_grid, cfg.feature_channels):
            raise ValueError(
                f"feature map shape {tuple(fmaps.shape[-3:])} does not match "
                f"{(*cfg.patch_grid, cfg.feature_channels)}"
            )
        flat = fmaps.reshape(*fmaps.shape[:-3], cfg.num_patches, cfg.feature_channels)
        if isinstance(self.patch_proj, nn.Linear):
            return self.patch_proj(flat) + self.pos_embed
        return torch.einsum("...pc,pdc->...pd", flat, self.patch_proj) + self.pos_embed

    def build_tokens(self, fmaps: torch.Tensor, ref_flat: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Assemble ``[g, r, f]`` for every frame.

        fmaps: (B, k+1, P_h, P_w, C); ref_flat: (B, k, 12).
        Returns tokens (B, k+1, N, d) and the pose encodings y (B, k+1, d),
        whose query row is zero.
        """
        cfg = self.config
        b, nf = fmaps.shape[:2]
        k = ref_flat.shape[1]
        if k != nf - 1:
            raise ValueError(f"{nf} frames need {nf - 1} reference poses, got {k}")
        if nf > cfg.k_max + 1:
            raise ValueError(f"{nf} frames exceed the configured maximum of {cfg.k_max + 1}")
        d = cfg.token_dim
        zeros = fmaps.new_zeros(b, 1, d)
        if cfg.use_pose_tokens and k:
            y = torch.cat([self.encode_poses(ref_flat), zeros], dim=1)
        else:
            y = fmaps.new_zeros(b, nf, d)
        slots = self.cam_tokens[:nf].expand(b, nf, d)
        if cfg.token_mode == "last_only":
            mask = torch.zeros(nf, 1, dtype=fmaps.dtype)
            mask[-1] = 1.0
            slots = slots * mask
        g = slots + y
        r = self.register_tokens.expand(b, nf, cfg.num_register_tokens, d)
        f = self.embed_patches(fmaps)
        return torch.cat([g.unsqueeze(2), r, f], dim=2), y

    # ---------------------------------------------------------------- forward

    def forward_raw(self, fmaps: torch.Tensor, ref_flat: torch.Tensor) -> torch.Tensor:
        x, y = self.build_tokens(fmaps, ref_flat)
        for block in self.blocks:
            x = block(x, y)
        return self.head(x[:, :, 0])

    def forward(self, fmaps: torch.Tensor, ref_flat: torch.Tensor):
        return decode_head(self.forward_raw(fmaps, ref_flat))

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


Weights = PoseRegressor


# ----------------------------------------------------------- numpy-facing API


def _tensor(a, model: PoseRegressor) -> torch.Tensor:
    return torch.as_tensor(np.asarray(a, dtype=np.float64)).to(model.dtype)


def _check_pose(p: Pose) -> np.ndarray:
    v = flatten_pose(p)
    if not np.all(np.isfinite(v)):
        raise ValueError("pose is not finite")
    return v


def encode_pose_token(p: Pose, weights: PoseRegressor) -> np.ndarray:
    with torch.no_grad():
        return weights.encode_poses(_tensor(_check_pose(p), weights)).double().numpy()


def embed_patches(feature_map: np.ndarray, weights: PoseRegressor) -> np.ndarray:
    with torch.no_grad():
        return weights.embed_patches(_tensor(feature_map, weights)).double().numpy()


def _inputs(images: Sequence[np.ndarray], ref_poses: Sequence[Pose], weights: PoseRegressor):
    if len(ref_poses) != len(images) - 1:
        raise ValueError(f"{len(images)} frames need {len(images) - 1} reference poses, got {len(ref_poses)}")
    fmaps = _tensor(np.stack(images), weights)[None]
    flat = np.stack([_check_pose(p) for p in ref_poses]) if ref_poses else np.zeros((0, 12))
    return fmaps, _tensor(flat, weights)[None]


def build_tokens(images: Sequence[np.ndarray], ref_poses: Sequence[Pose], weights: PoseRegressor) -> TokenSet:
    fmaps, flat = _inputs(images, ref_poses, weights)
    with torch.no_grad():
        t, _ = weights.build_tokens(fmaps, flat)
    return TokenSet.from_stacked(t[0].double().numpy(), weights.config.num_register_tokens)


def pose_encodings(ref_poses: Sequence[Pose], weights: PoseRegressor) -> np.ndarray:
    """``y`` rows for the references followed by the zero query row."""
    d = weights.config.token_dim
    rows = [encode_pose_token(p, weights) for p in ref_poses] if weights.config.use_pose_tokens else [
        np.zeros(d) for _ in ref_poses
    ]
    return np.stack(rows + [np.zeros(d)])


def aa_block(tokens: TokenSet, y: np.ndarray, block: AABlock, num_registers: int | None = None) -> TokenSet:
    p = next(block.parameters())
    t = torch.as_tensor(tokens.stacked()).to(p.dtype)[None]
    with torch.no_grad():
        out = block(t, torch.as_tensor(np.asarray(y)).to(p.dtype)[None])
    r = tokens.register_tokens.shape[1] if num_registers is None else num_registers
    return TokenSet.from_stacked(out[0].double().numpy(), r)


def _outputs(q: torch.Tensor, c: torch.Tensor, f: torch.Tensor) -> list[CameraOutput]:
    q = q.detach().double().numpy()
    c = c.detach().double().numpy()
    f = f.detach().double().numpy()
    out = []
    for qi, ci, fi in zip(q, c, f):
        qi = qi / np.linalg.norm(qi)
        out.append(CameraOutput(Quaternion(*qi).canonical(), ci.copy(), float(fi[0]), float(fi[1])))
    return out


def camera_head(pose_token_rows: np.ndarray, head: CameraHead) -> list[CameraOutput]:
    rows = np.asarray(pose_token_rows)
    if rows.ndim != 2 or rows.shape[0] < 1:
        raise ValueError(f"expected (frames >= 1, d) rows, got {rows.shape}")
    p = next(head.parameters())
    with torch.no_grad():
        q, c, f = decode_head(head(torch.as_tensor(rows).to(p.dtype)[None]))
    return _outputs(q[0], c[0], f[0])


def forward(images: Sequence[np.ndarray], ref_poses: Sequence[Pose], weights: PoseRegressor) -> list[CameraOutput]:
    """Regress camera outputs for ``k`` references followed by the query.

    ``ref_poses`` must already be relative to the first frame and normalized.
    """
    fmaps, flat = _inputs(images, ref_poses, weights)
    with torch.no_grad():
        q, c, f = weights(fmaps, flat)
    return _outputs(q[0], c[0], f[0])


# ------------------------------------------------------------- checkpoints


class CheckpointError(ValueError):
    pass


def checkpoint_dict(model: PoseRegressor, extra: dict | None = None) -> dict:
    params = {}
    for name, p in model.state_dict().items():
        a = p.detach().double().numpy()
        params[name] = {"shape": list(a.shape), "values": a.ravel().tolist()}
    doc = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(model.config),
        "seed": model.config.seed,
        "params": params,
    }
    if extra:
        doc["extra"] = extra
    return doc


def save_checkpoint(model: PoseRegressor, path, extra: dict | None = None) -> None:
    Path(path).write_text(json.dumps(checkpoint_dict(model, extra), allow_nan=False) + "\n")


def model_from_dict(doc: dict) -> PoseRegressor:
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {doc.get('format')!r}")
    try:
        config = ModelConfig.from_dict(doc["config"])
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"invalid checkpoint config: {e}") from None
    model = PoseRegressor(config)
    state = model.state_dict()
    params = doc.get("params", {})
    missing = set(state) - set(params)
    unknown = set(params) - set(state)
    if missing or unknown:
        raise CheckpointError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(unknown)}")
    loaded = {}
    for name, ref in state.items():
        entry = params[name]
        shape = tuple(entry["shape"])
        if shape != tuple(ref.shape):
            raise CheckpointError(f"{name}: checkpoint shape {shape} != model shape {tuple(ref.shape)}")
        values = np.asarray(entry["values"], dtype=np.float64)
        if values.size != ref.numel():
            raise CheckpointError(f"{name}: {values.size} values for shape {shape}")
        loaded[name] = torch.as_tensor(values.reshape(shape)).to(ref.dtype)
    model.load_state_dict(loaded)
    return model


def load_checkpoint(path) -> PoseRegressor:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from None
    return model_from_dict(doc)
