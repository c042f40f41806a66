"""Spectral clustering of speaker-segment embeddings plus the segment filter.

Embeddings are external inputs (tensor file + JSONL span manifest); no
extractor lives here. Cluster count comes from the eigengap of the
normalized Laplacian, capped at ``max_k``.
"""

from dataclasses import dataclass

import numpy as np

from .errors import InputError, NumericalError
from .rectifier import DiarizationMatrix


@dataclass
class EmbeddingSet:
    """Segment embeddings with their time spans and optional word counts."""

    vectors: np.ndarray
    spans: list
    word_counts: list | None = None

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise InputError(f"embeddings must be 2-D, got {self.vectors.shape}")
        if not np.all(np.isfinite(self.vectors)):
            raise InputError("embeddings contain non-finite values")
        if len(self.spans) != len(self.vectors):
            raise InputError("spans and embedding rows are misaligned")
        if self.word_counts is not None and len(self.word_counts) != len(self.vectors):
            raise InputError("word_counts and embedding rows are misaligned")


@dataclass
class ClusterAssignment:
    labels: np.ndarray
    num_clusters: int


def cosine_affinity(embeddings) -> np.ndarray:
    """A(i, j) = max(0, cos(v_i, v_j)) with unit diagonal."""
    vectors = np.asarray(getattr(embeddings, "vectors", embeddings), dtype=np.float64)
    norms = np.linalg.norm(vectors, axis=1)
    if np.any(norms == 0.0):
        raise InputError("zero-norm embedding vector")
    unit = vectors / norms[:, None]
    affinity = unit @ unit.T
    affinity = 0.5 * (affinity + affinity.T)
    affinity = np.maximum(affinity, 0.0)
    np.fill_diagonal(affinity, 1.0)
    return affinity


def _normalized_laplacian(affinity):
    degree = affinity.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(np.maximum(degree, 1e-12))
    return np.eye(len(affinity)) - inv_sqrt[:, None] * affinity * inv_sqrt[None, :]


def estimate_num_speakers(affinity: np.ndarray, max_k: int = 8) -> int:
    """Eigengap heuristic on the normalized Laplacian spectrum."""
    if affinity.ndim != 2 or affinity.shape[0] != affinity.shape[1]:
        raise InputError("affinity must be square")
    num_segments = affinity.shape[0]
    if num_segments < 2:
        return 1
    eigenvalues = np.linalg.eigvalsh(_normalized_laplacian(affinity))
    limit = min(max_k, num_segments - 1)
    gaps = eigenvalues[1 : limit + 1] - eigenvalues[:limit]
    return int(np.argmax(gaps)) + 1


def _kmeans_plus_plus(points, k, rng):
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(len(points))]
    closest = np.full(len(points), np.inf)
    for i in range(1, k):
        dist = np.sum((points - centers[i - 1]) ** 2, axis=1)
        closest = np.minimum(closest, dist)
        total = closest.sum()
        if total <= 0:
            centers[i] = points[rng.integers(len(points))]
            continue
        centers[i] = points[rng.choice(len(points), p=closest / total)]
    return centers


def _kmeans(points, k, rng, max_iter=100):
    centers = _kmeans_plus_plus(points, k, rng)
    labels = np.zeros(len(points), dtype=int)
    for _ in range(max_iter):
        dists = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_labels = dists.argmin(axis=1)
        for j in range(k):
            member = new_labels == j
            if member.any():
                centers[j] = points[member].mean(axis=0)
            else:
                centers[j] = points[dists.min(axis=1).argmax()]
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    inertia = float(((points - centers[labels]) ** 2).sum())
    return labels, inertia


def spectral_cluster(affinity: np.ndarray, num_clusters: int,
                     seed: int = 0, restarts: int = 50) -> ClusterAssignment:
    """Normalized-Laplacian embedding followed by seeded k-means.

    Deterministic for a fixed seed; k-means runs ``restarts`` times from
    k-means++ starts and the lowest-inertia labelling wins.
    """
    num_segments = affinity.shape[0]
    if num_clusters > num_segments:
        raise InputError(
            f"{num_clusters} clusters requested for {num_segments} segments"
        )
    if num_clusters == num_segments:
        return ClusterAssignment(
            labels=np.arange(num_segments), num_clusters=num_clusters
        )
    try:
        _, eigenvectors = np.linalg.eigh(_normalized_laplacian(affinity))
    except np.linalg.LinAlgError as exc:
        raise NumericalError("eigendecomposition of the Laplacian failed") from exc
    spectral = eigenvectors[:, :num_clusters]
    row_norms = np.linalg.norm(spectral, axis=1)
    spectral = spectral / np.maximum(row_norms, 1e-12)[:, None]

    rng = np.random.default_rng(seed)
    best_labels, best_inertia = None, np.inf
    for _ in range(restarts):
        labels, inertia = _kmeans(spectral, num_clusters, rng)
        if inertia < best_inertia - 1e-12:
            best_labels, best_inertia = labels, inertia

    remap, ordered = {}, 0
    for label in best_labels:
        if label not in remap:
            remap[label] = ordered
            ordered += 1
    labels = np.array([remap[label] for label in best_labels])
    return ClusterAssignment(labels=labels, num_clusters=num_clusters)


def segments_to_diarization(assignment: ClusterAssignment, spans,
                            frame_rate: float, total_frames: int) -> DiarizationMatrix:
    """Paint cluster-labelled spans onto a frame grid.

    Frame l covers [l/frame_rate, (l+1)/frame_rate); overlapping spans of the
    same cluster merge silently.
    """
    if len(spans) != len(assignment.labels):
        raise InputError("spans and labels are misaligned")
    d = np.zeros((total_frames, assignment.num_clusters))
    for (start_s, end_s, *_), label in zip(spans, assignment.labels):
        i0 = max(int(np.floor(start_s * frame_rate + 1e-9)), 0)
        i1 = min(int(np.ceil(end_s * frame_rate - 1e-9)), total_frames)
        if i1 > i0:
            d[i0:i1, label] = 1.0
    return DiarizationMatrix(d=d, frame_rate=frame_rate)


def filter_short_segments(segments, word_counts=None, min_words: int = 2,
                          min_duration_s: float = 0.4):
    """Drop segments too short to cluster reliably.

    With word counts, segments of at most ``min_words - 1`` words are
    dropped; without them, segments shorter than ``min_duration_s`` are.
    Ordering is preserved.
    """
    if word_counts is not None:
        if len(word_counts) != len(segments):
            raise InputError("word_counts and segments are misaligned")
        return [
            seg for seg, count in zip(segments, word_counts) if count >= min_words
        ]
    return [seg for seg in segments if seg.duration_s >= min_duration_s]
