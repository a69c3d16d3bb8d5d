"""Agglomerative clustering of chunk-wise speaker embeddings.

Each (chunk, slot) item carries one embedding vector weighted by its
attributed speech. Clusters merge greedily by smallest centroid cosine
distance until the distance threshold is exceeded; clusters below the
minimum size are then dissolved and their members reassigned to the
nearest surviving centroid. Cluster ids identify global speakers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

__all__ = [
    "EmbeddingItem",
    "EmbeddingSet",
    "ClusterAssignment",
    "ClusteringConfig",
    "CHUNK_CLUSTERING_TABLE",
    "hac_centroid",
    "embed_stub",
    "random_centroid_bank",
]

# Tuned (threshold, minimum cluster size) per chunk size, shared across
# segmentation backends of equal chunk size.
CHUNK_CLUSTERING_TABLE: dict[float, tuple[float, int]] = {
    5.0: (0.6915, 10),
    10.0: (0.6836, 7),
    30.0: (0.6791, 6),
    50.0: (0.6846, 6),
}


@dataclass(frozen=True)
class EmbeddingItem:
    """One local speaker's embedding: (chunk, slot, vector, weight seconds)."""

    chunk: int
    slot: int
    vector: np.ndarray
    weight: float


@dataclass(frozen=True)
class EmbeddingSet:
    """Embeddings collected over all chunks of a recording."""

    dim: int
    items: tuple[EmbeddingItem, ...]

    def __post_init__(self):
        seen = set()
        frozen_items = []
        for item in self.items:
            vector = np.ascontiguousarray(np.asarray(item.vector, dtype=np.float64))
            if vector.shape != (self.dim,):
                raise ValueError(
                    f"item ({item.chunk}, {item.slot}) has shape {vector.shape}, expected ({self.dim},)"
                )
            if not np.isfinite(vector).all():
                raise ValueError(f"item ({item.chunk}, {item.slot}) has a non-finite vector")
            if item.weight < 0:
                raise ValueError(f"item ({item.chunk}, {item.slot}) has negative weight")
            key = (item.chunk, item.slot)
            if key in seen:
                raise ValueError(f"duplicate item for chunk {item.chunk}, slot {item.slot}")
            seen.add(key)
            vector.setflags(write=False)
            frozen_items.append(EmbeddingItem(item.chunk, item.slot, vector, float(item.weight)))
        object.__setattr__(self, "items", tuple(frozen_items))

    def to_json_dict(self) -> dict:
        return {
            "dim": self.dim,
            "items": [
                {
                    "chunk": item.chunk,
                    "slot": item.slot,
                    "weight": item.weight,
                    "vector": item.vector.tolist(),
                }
                for item in self.items
            ],
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "EmbeddingSet":
        return cls(
            int(data["dim"]),
            tuple(
                EmbeddingItem(
                    int(entry["chunk"]),
                    int(entry["slot"]),
                    np.asarray(entry["vector"], dtype=np.float64),
                    float(entry["weight"]),
                )
                for entry in data["items"]
            ),
        )

    @classmethod
    def merge(cls, sets: Sequence["EmbeddingSet"]) -> "EmbeddingSet":
        if not sets:
            raise ValueError("cannot merge an empty list of embedding sets")
        dim = sets[0].dim
        items: list[EmbeddingItem] = []
        for one in sets:
            if one.dim != dim:
                raise ValueError(f"dimension mismatch: {one.dim} vs {dim}")
            items.extend(one.items)
        return cls(dim, tuple(items))


@dataclass(frozen=True)
class ClusterAssignment:
    """Mapping from (chunk, slot) items to dense cluster ids 0..n_clusters-1."""

    n_clusters: int
    assignments: Mapping[tuple[int, int], int]
    centroids: np.ndarray


@dataclass(frozen=True)
class ClusteringConfig:
    """Stopping threshold (cosine distance) and minimum cluster size."""

    threshold: float
    min_cluster_size: int

    def __post_init__(self):
        if not 0.0 < self.threshold < 2.0:
            raise ValueError(f"threshold must lie in (0, 2), got {self.threshold}")
        if self.min_cluster_size < 1:
            raise ValueError(f"min_cluster_size must be at least 1, got {self.min_cluster_size}")

    @classmethod
    def for_chunk_size(cls, chunk_size: float) -> "ClusteringConfig":
        """Tuned defaults for the nearest tabulated chunk size."""
        key = min(CHUNK_CLUSTERING_TABLE, key=lambda k: (abs(k - chunk_size), k))
        threshold, min_size = CHUNK_CLUSTERING_TABLE[key]
        return cls(threshold, min_size)


def _unit(vectors: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=-1, keepdims=True)
    if np.any(norms < 1e-12):
        raise ValueError("cannot normalize a zero-norm vector")
    return vectors / norms


def hac_centroid(embeddings: EmbeddingSet, config: ClusteringConfig) -> ClusterAssignment:
    """Cluster embeddings by agglomerative centroid linkage.

    Vectors are unit-normalized; a cluster centroid is the weight-averaged
    member vector renormalized to unit norm, so long chunks dominate. The
    two closest clusters (cosine distance) merge repeatedly until the
    smallest distance exceeds ``config.threshold``; ties pick the lowest
    cluster-id pair. Clusters smaller than ``config.min_cluster_size`` are
    then dissolved and each member joins the nearest surviving centroid;
    if nothing survives, the largest dissolved cluster is retained.
    Zero-weight items are excluded.
    """
    items = [item for item in embeddings.items if item.weight > 0]
    if not items:
        raise ValueError("no items with positive weight to cluster")

    n = len(items)
    vectors = _unit(np.stack([item.vector for item in items]))
    weights = np.array([item.weight for item in items])

    weighted_sum = vectors * weights[:, np.newaxis]
    centroids = vectors.copy()
    members: list[list[int]] = [[i] for i in range(n)]
    alive = np.ones(n, dtype=bool)

    distances = 1.0 - centroids @ centroids.T
    np.fill_diagonal(distances, np.inf)

    while alive.sum() > 1:
        flat = int(np.argmin(distances))
        i, j = divmod(flat, n)
        if distances[i, j] > config.threshold:
            break
        if j < i:
            i, j = j, i
        weighted_sum[i] += weighted_sum[j]
        members[i].extend(members[j])
        centroids[i] = _unit(weighted_sum[i][np.newaxis, :])[0]
        alive[j] = False
        distances[j, :] = np.inf
        distances[:, j] = np.inf
        row = 1.0 - centroids @ centroids[i]
        row[~alive] = np.inf
        row[i] = np.inf
        distances[i, :] = row
        distances[:, i] = row

    cluster_ids = [i for i in range(n) if alive[i]]
    survivors = [i for i in cluster_ids if len(members[i]) >= config.min_cluster_size]
    if not survivors:
        survivors = [max(cluster_ids, key=lambda i: (len(members[i]), -i))]

    final_members: dict[int, list[int]] = {i: list(members[i]) for i in survivors}
    survivor_centroids = centroids[survivors]
    for i in cluster_ids:
        if i in final_members:
            continue
        for m in members[i]:
            nearest = survivors[int(np.argmin(1.0 - survivor_centroids @ vectors[m]))]
            final_members[nearest].append(m)

    assignments: dict[tuple[int, int], int] = {}
    final_centroids = np.zeros((len(survivors), embeddings.dim))
    for dense, i in enumerate(sorted(final_members)):
        member_ids = final_members[i]
        total = weights[member_ids][:, np.newaxis] * vectors[member_ids]
        final_centroids[dense] = _unit(total.sum(axis=0)[np.newaxis, :])[0]
        for m in member_ids:
            assignments[(items[m].chunk, items[m].slot)] = dense
    final_centroids.setflags(write=False)
    return ClusterAssignment(len(survivors), assignments, final_centroids)


def embed_stub(
    local_segmentation,
    true_identity_map: Mapping[int, str],
    centroid_bank: Mapping[str, np.ndarray],
    noise_scale: float,
    chunk_index: int = 0,
    rng: np.random.Generator | None = None,
) -> EmbeddingSet:
    """Simulated embedding extractor standing in for a neural model.

    For every slot with some non-overlapped attributed speech (frames where
    it is the only active slot), emits the slot's true speaker centroid
    plus isotropic noise of relative magnitude ``noise_scale``,
    renormalized to unit norm; the weight is the non-overlapped speech in
    seconds. Slots whose speech is entirely overlapped, and slots absent
    from ``true_identity_map``, are omitted.
    """
    if noise_scale < 0:
        raise ValueError(f"noise_scale must be non-negative, got {noise_scale}")
    rng = rng if rng is not None else np.random.default_rng(0)

    active = local_segmentation.values > 0.5
    solo = active.sum(axis=1) == 1
    frame_duration = local_segmentation.grid.frame_duration
    dim = len(next(iter(centroid_bank.values())))

    items = []
    for slot in range(local_segmentation.num_speakers):
        label = true_identity_map.get(slot)
        if label is None:
            continue
        seconds = float((active[:, slot] & solo).sum()) * frame_duration
        if seconds <= 0:
            continue
        vector = np.asarray(centroid_bank[label], dtype=np.float64)
        if noise_scale > 0:
            direction = rng.standard_normal(dim)
            vector = vector + noise_scale * direction / np.linalg.norm(direction)
        items.append(EmbeddingItem(chunk_index, slot, _unit(vector[np.newaxis, :])[0], seconds))
    return EmbeddingSet(dim, tuple(items))


def random_centroid_bank(
    labels: Sequence[str],
    dim: int,
    rng: np.random.Generator,
    pairwise_similarity: float = 0.0,
) -> dict[str, np.ndarray]:
    """Unit anchor per label with controlled pairwise cosine similarity.

    Anchors start mutually orthogonal in a randomly rotated basis, so
    distinct speakers sit at cosine distance exactly 1 and separability is
    governed purely by the embedding noise. A positive
    ``pairwise_similarity`` blends every anchor toward a shared direction,
    moving all speaker pairs to that cosine similarity; this models corpora
    whose voices are harder to tell apart.
    """
    labels = sorted(labels)
    if not 0.0 <= pairwise_similarity < 1.0:
        raise ValueError(f"pairwise_similarity must lie in [0, 1), got {pairwise_similarity}")
    extra = 1 if pairwise_similarity > 0 else 0
    if dim < len(labels) + extra:
        raise ValueError(
            f"need dim >= {len(labels) + extra} to place {len(labels)} labels, got {dim}"
        )
    basis, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    if pairwise_similarity == 0:
        return {label: basis[i].copy() for i, label in enumerate(labels)}
    shared = basis[len(labels)]
    gamma = np.sqrt(pairwise_similarity / (1.0 - pairwise_similarity))
    return {
        label: _unit((basis[i] + gamma * shared)[np.newaxis, :])[0]
        for i, label in enumerate(labels)
    }
