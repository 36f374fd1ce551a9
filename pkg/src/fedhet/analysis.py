"""Cross-task similarity statistics and task-specific evaluation metrics.

The adjusted Rand index is computed from the contingency table; permutation
p-values use add-one smoothing, (exceedances + 1) / (P + 1), which makes the
all-below case with P=100 come out at exactly 1/101 = 0.0099.  Cross-seed
aggregation reports the sample (n-1) standard deviation.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError, ShapeError
from .rng import RngStream


@dataclass(frozen=True)
class Clustering:
    """A group index per datapoint over a shared id set."""

    ids: tuple[int, ...]
    labels: tuple[int, ...]

    @classmethod
    def from_arrays(cls, ids, labels) -> "Clustering":
        ids = tuple(int(v) for v in ids)
        labels = tuple(int(v) for v in labels)
        if len(ids) != len(labels):
            raise InvalidParameterError("ids and labels must align")
        return cls(ids, labels)

    def aligned_labels(self, other: "Clustering") -> tuple[np.ndarray, np.ndarray]:
        if set(self.ids) != set(other.ids):
            raise InvalidParameterError("clusterings cover different id sets")
        order = {v: i for i, v in enumerate(other.ids)}
        b = np.array(other.labels, dtype=np.int64)
        b_aligned = b[[order[v] for v in self.ids]]
        return np.array(self.labels, dtype=np.int64), b_aligned


@dataclass(frozen=True)
class SimilarityCell:
    ari: float
    p_value: float | None  # None on the diagonal


def _comb2(x: np.ndarray) -> np.ndarray:
    return x * (x - 1) / 2.0


def ari_from_labels(a: np.ndarray, b: np.ndarray) -> float:
    """Contingency-table ARI of two label arrays over the same points."""
    if a.shape != b.shape or a.size < 2:
        raise InvalidParameterError("need two aligned labelings of >= 2 points")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1.0)
    index = _comb2(table).sum()
    sum_a = _comb2(table.sum(axis=1)).sum()
    sum_b = _comb2(table.sum(axis=0)).sum()
    total_pairs = a.size * (a.size - 1) / 2.0
    expected = sum_a * sum_b / total_pairs
    maximum = 0.5 * (sum_a + sum_b)
    if maximum == expected:
        # Both partitions trivial (all one cluster or all singletons).
        return 1.0
    return float((index - expected) / (maximum - expected))


def adjusted_rand_index(a: Clustering, b: Clustering) -> float:
    la, lb = a.aligned_labels(b)
    return ari_from_labels(la, lb)


def permutation_p_value(
    a: Clustering, b: Clustering, permutations: int, rng: RngStream
) -> float:
    """Add-one-smoothed fraction of label permutations reaching the observed ARI.

    Only the second clustering's labels are permuted; ARI symmetry makes the
    choice immaterial but fixing it keeps runs reproducible.
    """
    if permutations < 1:
        raise InvalidParameterError("need at least one permutation")
    la, lb = a.aligned_labels(b)
    observed = ari_from_labels(la, lb)
    exceed = 0
    for _ in range(permutations):
        perm = rng.permutation(lb.size)
        if ari_from_labels(la, lb[perm]) >= observed:
            exceed += 1
    return (exceed + 1) / (permutations + 1)


def similarity_heatmap(
    clusterings: dict[str, Clustering], permutations: int, rng: RngStream
) -> dict[tuple[str, str], SimilarityCell]:
    """All-pairs ARI with permutation p-values; diagonal pinned to (1, None)."""
    names = list(clusterings)
    if len(names) < 2:
        raise InvalidParameterError("need at least 2 clusterings")
    cells: dict[tuple[str, str], SimilarityCell] = {}
    for i, na in enumerate(names):
        cells[(na, na)] = SimilarityCell(1.0, None)
        for nb in names[i + 1 :]:
            a, b = clusterings[na], clusterings[nb]
            ari = adjusted_rand_index(a, b)
            p = permutation_p_value(a, b, permutations, rng.derive("pair", na, nb))
            cells[(na, nb)] = SimilarityCell(ari, p)
            cells[(nb, na)] = SimilarityCell(ari, p)
    return cells


def cross_seed_aggregate(values) -> tuple[float, float]:
    """Sample mean and sample (n-1) standard deviation across seeds."""
    arr = np.asarray(values, dtype=float)
    if arr.size < 2:
        raise InvalidParameterError("need at least 2 seeds for a std")
    mean = float(arr.mean())
    std = math.sqrt(float(((arr - mean) ** 2).sum()) / (arr.size - 1))
    return mean, std


class TaskMetric(enum.Enum):
    RMSE = "rmse"
    PSNR = "psnr"
    MIOU = "miou"
    F_MEASURE = "f-measure"
    ACCURACY = "accuracy"


def rmse(predictions: np.ndarray, targets: np.ndarray) -> float:
    p, t = _aligned(predictions, targets)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def psnr(predictions: np.ndarray, targets: np.ndarray, peak: float | None = None) -> float:
    """10 * log10(peak^2 / MSE); +inf when the prediction is exact.

    The peak defaults to the targets' largest absolute value.
    """
    p, t = _aligned(predictions, targets)
    if peak is None:
        peak = float(np.max(np.abs(t)))
    if peak <= 0:
        raise InvalidParameterError("peak must be positive")
    mse = float(np.mean((p - t) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def mean_iou(predictions: np.ndarray, targets: np.ndarray, num_classes: int) -> float:
    """Mean over classes of intersection/union, skipping classes absent
    from both prediction and target."""
    p, t = _aligned(predictions, targets)
    p = p.astype(np.int64).ravel()
    t = t.astype(np.int64).ravel()
    ious = []
    for c in range(num_classes):
        inter = np.count_nonzero((p == c) & (t == c))
        union = np.count_nonzero((p == c) | (t == c))
        if union == 0:
            continue
        ious.append(inter / union)
    if not ious:
        raise InvalidParameterError("no class present in either labeling")
    return float(np.mean(ious))


def f_measure(predictions: np.ndarray, targets: np.ndarray, threshold: float = 0.5) -> float:
    """2PR/(P+R) after binarizing both sides at the threshold; 0 when P+R=0."""
    p, t = _aligned(predictions, targets)
    pb = p.ravel() >= threshold
    tb = t.ravel() >= threshold
    tp = np.count_nonzero(pb & tb)
    prec = tp / pb.sum() if pb.any() else 0.0
    rec = tp / tb.sum() if tb.any() else 0.0
    if prec + rec == 0.0:
        return 0.0
    return float(2.0 * prec * rec / (prec + rec))


def accuracy(predictions: np.ndarray, targets: np.ndarray) -> float:
    p, t = _aligned(predictions, targets)
    return float(np.mean(p.astype(np.int64).ravel() == t.astype(np.int64).ravel()))


def task_metric(kind: TaskMetric, predictions, targets, **params) -> float:
    predictions = np.asarray(predictions)
    targets = np.asarray(targets)
    if kind is TaskMetric.RMSE:
        return rmse(predictions, targets)
    if kind is TaskMetric.PSNR:
        return psnr(predictions, targets, params.get("peak"))
    if kind is TaskMetric.MIOU:
        return mean_iou(predictions, targets, params["num_classes"])
    if kind is TaskMetric.F_MEASURE:
        return f_measure(predictions, targets, params.get("threshold", 0.5))
    return accuracy(predictions, targets)


def _aligned(predictions: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(predictions, dtype=float)
    t = np.asarray(targets, dtype=float)
    if p.shape != t.shape:
        raise ShapeError("prediction/target shape mismatch")
    return p, t
