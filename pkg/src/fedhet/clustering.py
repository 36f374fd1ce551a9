"""Embedding extraction, K-means clustering, and cluster-validity scoring.

Embeddings are the model's penultimate-layer activations, one row per
datapoint.  K-means uses k-means++ seeding and Lloyd iterations with squared
Euclidean distances; silhouette scoring uses plain Euclidean distances.
Empty clusters are repaired by stealing the point currently farthest from
its centroid.

Embedding files are ``id,e0..e{h-1}``; cluster files are ``id,cluster``.
Both are plain delimited text so externally produced embeddings can enter
the pipeline at either stage.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import GroupedDataset
from .errors import InvalidParameterError, ParseError, ShapeError
from .nn import Architecture, ModelParams, forward
from .rng import RngStream

DEFAULT_K = 16
DEFAULT_MAX_ITERS = 300
DEFAULT_SWEEP_KS = (2, 4, 10, 16, 32)


@dataclass
class EmbeddingMatrix:
    ids: np.ndarray      # (n,)
    vectors: np.ndarray  # (n, h)

    def __post_init__(self):
        if self.vectors.ndim != 2 or self.vectors.shape[0] != self.ids.shape[0]:
            raise ShapeError("embedding rows must align with ids")
        if self.vectors.shape[1] < 1:
            raise ShapeError("embedding width must be >= 1")

    def __len__(self) -> int:
        return int(self.ids.shape[0])


@dataclass
class ClusterModel:
    centroids: np.ndarray     # (k, h)
    assignments: np.ndarray   # (n,) int in 0..k-1
    inertia: float
    seed: int

    @property
    def k(self) -> int:
        return int(self.centroids.shape[0])


def extract_embeddings(
    params: ModelParams, arch: Architecture, dataset: GroupedDataset
) -> EmbeddingMatrix:
    """Penultimate activations per datapoint, in dataset order."""
    _, penult = forward(params, arch, dataset.features)
    return EmbeddingMatrix(ids=dataset.ids.copy(), vectors=penult)


def _sq_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # (n, k) squared Euclidean distances without an (n, k, h) intermediate.
    d2 = (
        (points**2).sum(axis=1)[:, None]
        + (centroids**2).sum(axis=1)[None, :]
        - 2.0 * points @ centroids.T
    )
    return np.maximum(d2, 0.0)


def _plus_plus_init(points: np.ndarray, k: int, rng: RngStream) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]))
    first = int(rng.uniform() * n)
    centroids[0] = points[min(first, n - 1)]
    closest = ((points - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            # All remaining points coincide with chosen centroids.
            centroids[j] = points[int(rng.uniform() * n) % n]
            continue
        idx = int(np.searchsorted(np.cumsum(closest / total), rng.uniform(), side="right"))
        idx = min(idx, n - 1)
        centroids[j] = points[idx]
        closest = np.minimum(closest, ((points - centroids[j]) ** 2).sum(axis=1))
    return centroids


def kmeans_fit(
    embeddings: EmbeddingMatrix,
    k: int = DEFAULT_K,
    seed: int = 0,
    max_iters: int = DEFAULT_MAX_ITERS,
) -> ClusterModel:
    """k-means++ seeding then Lloyd iterations to an assignment fixpoint.

    Inertia is checked to be non-increasing across iterations; a violation
    indicates a broken update and raises.
    """
    points = embeddings.vectors
    n = points.shape[0]
    if not 1 <= k <= n:
        raise InvalidParameterError(f"need 1 <= k <= n, got k={k}, n={n}")
    if max_iters < 1:
        raise InvalidParameterError("max_iters must be >= 1")
    rng = RngStream(seed).derive("kmeans", k)
    centroids = _plus_plus_init(points, k, rng)

    assignments = None
    last_inertia = np.inf
    for _ in range(max_iters):
        d2 = _sq_distances(points, centroids)
        new_assign = d2.argmin(axis=1)
        repaired = _repair_empty(points, centroids, new_assign, d2, k)
        if repaired is not new_assign:
            new_assign = repaired
            d2 = _sq_distances(points, centroids)
        inertia = float(d2[np.arange(n), new_assign].sum())
        if inertia > last_inertia + 1e-9 * max(1.0, last_inertia):
            raise RuntimeError("k-means inertia increased; update step is broken")
        last_inertia = inertia
        if assignments is not None and np.array_equal(new_assign, assignments):
            break
        assignments = new_assign
        for j in range(k):
            members = points[assignments == j]
            if members.shape[0]:
                centroids[j] = members.mean(axis=0)

    d2 = _sq_distances(points, centroids)
    inertia = float(d2[np.arange(n), assignments].sum())
    return ClusterModel(centroids=centroids, assignments=assignments.astype(np.int64),
                        inertia=inertia, seed=int(seed))


def _repair_empty(points, centroids, assign, d2, k):
    """Give every empty cluster the point farthest from its own centroid."""
    counts = np.bincount(assign, minlength=k)
    empties = np.nonzero(counts == 0)[0]
    if empties.size == 0:
        return assign
    assign = assign.copy()
    for j in empties:
        dist_own = d2[np.arange(points.shape[0]), assign].copy()
        # Never steal the sole member of another cluster.
        counts = np.bincount(assign, minlength=k)
        dist_own[counts[assign] <= 1] = -np.inf
        victim = int(dist_own.argmax())
        assign[victim] = j
        centroids[j] = points[victim]
    return assign


def kmeans_assign(model: ClusterModel, embeddings: EmbeddingMatrix) -> np.ndarray:
    """Nearest-centroid assignment; ties go to the lowest centroid index."""
    if embeddings.vectors.shape[1] != model.centroids.shape[1]:
        raise ShapeError("embedding width does not match centroids")
    return _sq_distances(embeddings.vectors, model.centroids).argmin(axis=1).astype(np.int64)


def silhouette_score(embeddings: EmbeddingMatrix, assignments: np.ndarray) -> float:
    """Mean silhouette s(i) = (b - a) / max(a, b) over all points.

    a = mean distance to the point's own cluster, b = smallest mean distance
    to any other cluster.  Points in singleton clusters contribute 0.
    """
    points = embeddings.vectors
    labels = np.asarray(assignments, dtype=np.int64)
    if labels.shape[0] != points.shape[0]:
        raise ShapeError("assignments must align with embeddings")
    clusters = np.unique(labels)
    if clusters.size < 2:
        raise InvalidParameterError("silhouette needs at least 2 clusters")

    sq = (points**2).sum(axis=1)
    dist = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2.0 * points @ points.T, 0.0))
    n = points.shape[0]
    sums = np.zeros((n, clusters.size))
    counts = np.zeros(clusters.size, dtype=np.int64)
    for ci, c in enumerate(clusters):
        members = labels == c
        counts[ci] = members.sum()
        sums[:, ci] = dist[:, members].sum(axis=1)

    own = np.searchsorted(clusters, labels)
    scores = np.zeros(n)
    for i in range(n):
        ci = own[i]
        if counts[ci] <= 1:
            continue  # singleton: s = 0
        a = sums[i, ci] / (counts[ci] - 1)
        other = [sums[i, cj] / counts[cj] for cj in range(clusters.size) if cj != ci]
        b = min(other)
        denom = max(a, b)
        scores[i] = 0.0 if denom == 0.0 else (b - a) / denom
    return float(scores.mean())


def silhouette_sweep(
    embeddings: EmbeddingMatrix,
    k_values=DEFAULT_SWEEP_KS,
    seed: int = 0,
    max_iters: int = DEFAULT_MAX_ITERS,
) -> list[tuple[int, float]]:
    """Fit and score each k with a seed-derived sub-stream per k."""
    results = []
    for k in k_values:
        sub_seed = RngStream(seed).derive("sweep", k).stream_id % (2**32)
        model = kmeans_fit(embeddings, k=k, seed=int(sub_seed), max_iters=max_iters)
        results.append((int(k), silhouette_score(embeddings, model.assignments)))
    return results


# -- files --------------------------------------------------------------------


def save_embeddings(embeddings: EmbeddingMatrix, path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id"] + [f"e{i}" for i in range(embeddings.vectors.shape[1])])
        for i in range(len(embeddings)):
            writer.writerow(
                [str(int(embeddings.ids[i]))] + [repr(float(v)) for v in embeddings.vectors[i]]
            )


def load_embeddings(path) -> EmbeddingMatrix:
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", line=1) from None
        if not header or header[0] != "id" or len(header) < 2:
            raise ParseError("malformed header", line=1)
        ids, rows = [], []
        lineno = 1
        for row in reader:
            lineno += 1
            if len(row) != len(header):
                raise ParseError("ragged row", line=lineno)
            ids.append(int(row[0]))
            rows.append([float(v) for v in row[1:]])
    if not ids:
        raise ParseError("file contains no rows", line=2)
    return EmbeddingMatrix(np.array(ids, dtype=np.int64), np.array(rows, dtype=float))


def save_clusters(ids: np.ndarray, assignments: np.ndarray, path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "cluster"])
        for i, a in zip(ids, assignments):
            writer.writerow([str(int(i)), str(int(a))])


def load_clusters(path) -> tuple[np.ndarray, np.ndarray]:
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", line=1) from None
        if header != ["id", "cluster"]:
            raise ParseError("malformed header", line=1)
        ids, clusters = [], []
        lineno = 1
        for row in reader:
            lineno += 1
            if len(row) != 2:
                raise ParseError("ragged row", line=lineno)
            ids.append(int(row[0]))
            clusters.append(int(row[1]))
    if not ids:
        raise ParseError("file contains no rows", line=2)
    return np.array(ids, dtype=np.int64), np.array(clusters, dtype=np.int64)
