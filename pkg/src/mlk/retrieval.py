"""Reference-view selection for a query frame.

Three strategies share one result type: a ground-truth co-visibility oracle,
a place-recognition proxy that ranks by camera-center distance, and cosine
top-k over stored frame embeddings. Ties are always broken by frame id.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Frame, Scene, visible


class RetrievalStrategy(str, enum.Enum):
    COVIS_ORACLE = "covis_oracle"
    VPR_PROXY = "vpr_proxy"
    EMBEDDING = "embedding"

    @classmethod
    def parse(cls, value: str) -> "RetrievalStrategy":
        aliases = {"covis": cls.COVIS_ORACLE, "vpr": cls.VPR_PROXY}
        return aliases.get(value) or cls(value)

    @property
    def short(self) -> str:
        return {"covis_oracle": "covis", "vpr_proxy": "vpr", "embedding": "embedding"}[self.value]


@dataclass(frozen=True)
class RetrievalResult:
    frame_ids: tuple[str, ...]
    scores: tuple[float, ...]
    strategy: RetrievalStrategy

    def __post_init__(self):
        if len(self.frame_ids) != len(self.scores):
            raise ValueError("frame_ids and scores differ in length")
        if any(b > a for a, b in zip(self.scores, self.scores[1:])):
            raise ValueError("scores must be non-increasing")


@dataclass(frozen=True)
class EmbeddingIndex:
    frame_ids: tuple[str, ...]
    embeddings: np.ndarray
    centers: np.ndarray

    def __post_init__(self):
        emb = np.asarray(self.embeddings, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[0] != len(self.frame_ids):
            raise ValueError(f"embeddings shape {emb.shape} does not match {len(self.frame_ids)} ids")
        if len(set(self.frame_ids)) != len(self.frame_ids):
            raise ValueError("frame ids must be unique")
        if emb.size and np.max(np.abs(np.linalg.norm(emb, axis=1) - 1.0)) > 1e-9:
            raise ValueError("embeddings must be unit norm")
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "centers", np.asarray(self.centers, dtype=np.float64))

    @classmethod
    def from_frames(cls, frames: Sequence[Frame]) -> "EmbeddingIndex":
        return cls(
            tuple(f.id for f in frames),
            np.stack([f.embedding for f in frames]),
            np.stack([f.pose.center for f in frames]),
        )

    def __len__(self) -> int:
        return len(self.frame_ids)


def covis_score(scene: Scene, frame_a: str, frame_b: str) -> float:
    """Fraction of ``frame_a``'s visible landmarks that ``frame_b`` also sees."""
    va = visible(scene, scene.frame(frame_a))
    vb = visible(scene, scene.frame(frame_b))
    return np.count_nonzero(va & vb) / max(1, np.count_nonzero(va))


def _top_k(ids: Sequence[str], scores: Sequence[float], k: int, strategy) -> RetrievalResult:
    if k > len(ids):
        raise ValueError(f"k={k} exceeds the database size {len(ids)}")
    if k < 0:
        raise ValueError(f"k must be non-negative, got {k}")
    order = sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))[:k]
    return RetrievalResult(
        tuple(ids[i] for i in order), tuple(float(scores[i]) for i in order), strategy
    )


def _database_excluding(scene: Scene, query_frame: str) -> list[Frame]:
    scene.frame(query_frame)
    return [f for f in scene.database() if f.id != query_frame]


def retrieve_covis(scene: Scene, query_frame: str, k: int) -> RetrievalResult:
    db = _database_excluding(scene, query_frame)
    vq = visible(scene, scene.frame(query_frame))
    n = max(1, np.count_nonzero(vq))
    scores = [np.count_nonzero(vq & visible(scene, f)) / n for f in db]
    return _top_k([f.id for f in db], scores, k, RetrievalStrategy.COVIS_ORACLE)


def retrieve_vpr_proxy(scene: Scene, query_frame: str, k: int) -> RetrievalResult:
    db = _database_excluding(scene, query_frame)
    cq = scene.frame(query_frame).pose.center
    scores = [-float(np.linalg.norm(f.pose.center - cq)) for f in db]
    return _top_k([f.id for f in db], scores, k, RetrievalStrategy.VPR_PROXY)


def retrieve_embedding(index: EmbeddingIndex, query_embedding, k: int) -> RetrievalResult:
    q = np.asarray(query_embedding, dtype=np.float64)
    if len(index) == 0:
        raise ValueError("embedding index is empty")
    if q.shape != (index.embeddings.shape[1],):
        raise ValueError(f"query embedding has shape {q.shape}, index dimension is {index.embeddings.shape[1]}")
    scores = index.embeddings @ q
    return _top_k(index.frame_ids, list(scores), k, RetrievalStrategy.EMBEDDING)


def retrieve(scene: Scene, query_frame: str, k: int, strategy) -> RetrievalResult:
    strategy = RetrievalStrategy.parse(strategy) if isinstance(strategy, str) else strategy
    if strategy is RetrievalStrategy.COVIS_ORACLE:
        return retrieve_covis(scene, query_frame, k)
    if strategy is RetrievalStrategy.VPR_PROXY:
        return retrieve_vpr_proxy(scene, query_frame, k)
    index = EmbeddingIndex.from_frames(_database_excluding(scene, query_frame))
    return retrieve_embedding(index, scene.frame(query_frame).embedding, k)
