"""Dataset container, label preprocessing, synthetic generator, file I/O.

Datasets are columnar: ids, a feature matrix, a target matrix, and optional
per-point class labels and latent group labels.  The latent group is
generator provenance only; training code never reads it.

File format (UTF-8, comma-delimited, ``.`` decimal separator)::

    id,feat0..feat{d-1},tgt0..tgt{m-1},class,group

with missing optional fields written as empty cells.  Label-probability
tables use ``id,p0..p{J-1}``.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidParameterError, ParseError
from .rng import RngStream


class TaskKind(enum.Enum):
    REGRESSION_L1 = "regression-l1"
    REGRESSION_MSE = "regression-mse"
    CLASSIFICATION_CE = "classification-ce"

    @property
    def is_classification(self) -> bool:
        return self is TaskKind.CLASSIFICATION_CE


@dataclass(frozen=True)
class DataPoint:
    """One record view; datasets store these columns as arrays."""

    id: int
    features: np.ndarray
    target: np.ndarray
    class_label: int | None = None
    latent_group: int | None = None


@dataclass
class GroupedDataset:
    """Immutable-after-construction dataset shared by all pipeline stages.

    For classification tasks ``targets`` has one column holding the class
    index (stored as float for a uniform file format).
    """

    ids: np.ndarray            # (n,) int64, unique
    features: np.ndarray       # (n, d) float64
    targets: np.ndarray        # (n, m) float64
    task_kind: TaskKind = TaskKind.REGRESSION_MSE
    num_classes: int | None = None
    class_labels: np.ndarray | None = None   # (n,) int64 or None
    latent_groups: np.ndarray | None = None  # (n,) int64 or None

    def __post_init__(self):
        n = self.ids.shape[0]
        if n == 0:
            raise InvalidParameterError("dataset must be non-empty")
        if len(np.unique(self.ids)) != n:
            raise InvalidParameterError("dataset ids must be unique")
        if self.features.shape[0] != n or self.targets.shape[0] != n:
            raise InvalidParameterError("column lengths disagree")
        if self.task_kind.is_classification:
            if self.num_classes is None:
                raise InvalidParameterError("classification dataset needs num_classes")
            idx = self.targets[:, 0].astype(np.int64)
            if np.any(idx < 0) or np.any(idx >= self.num_classes):
                raise InvalidParameterError("class target out of range")
        if self.class_labels is not None and self.num_classes is not None:
            if np.any(self.class_labels >= self.num_classes) or np.any(
                self.class_labels < 0
            ):
                raise InvalidParameterError("class label out of range")

    def __len__(self) -> int:
        return int(self.ids.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    @property
    def target_dim(self) -> int:
        return int(self.targets.shape[1])

    def point(self, i: int) -> DataPoint:
        return DataPoint(
            id=int(self.ids[i]),
            features=self.features[i],
            target=self.targets[i],
            class_label=None if self.class_labels is None else int(self.class_labels[i]),
            latent_group=None if self.latent_groups is None else int(self.latent_groups[i]),
        )

    def subset(self, row_indices: np.ndarray) -> "GroupedDataset":
        idx = np.asarray(row_indices, dtype=np.int64)
        return GroupedDataset(
            ids=self.ids[idx],
            features=self.features[idx],
            targets=self.targets[idx],
            task_kind=self.task_kind,
            num_classes=self.num_classes,
            class_labels=None if self.class_labels is None else self.class_labels[idx],
            latent_groups=None if self.latent_groups is None else self.latent_groups[idx],
        )

    def rows_for_ids(self, wanted: np.ndarray) -> np.ndarray:
        """Row indices for the given datapoint ids (raises on unknown ids)."""
        pos = {int(v): i for i, v in enumerate(self.ids)}
        try:
            return np.array([pos[int(v)] for v in wanted], dtype=np.int64)
        except KeyError as exc:
            raise InvalidParameterError(f"unknown datapoint id {exc.args[0]}") from None


@dataclass
class LabelProbabilityTable:
    """Per-datapoint probability rows over J candidate classes."""

    ids: np.ndarray
    rows: np.ndarray  # (n, J), entries >= 0

    def __post_init__(self):
        if self.rows.ndim != 2 or self.rows.shape[0] != self.ids.shape[0]:
            raise InvalidParameterError("table rows must align with ids")
        if np.any(self.rows < 0):
            raise InvalidParameterError("probability entries must be >= 0")


def argmax_label(beta) -> int:
    """Index of the largest entry; ties break to the lowest index."""
    row = np.asarray(beta, dtype=float)
    if row.ndim != 1 or row.size == 0:
        raise InvalidParameterError("probability row must be non-empty")
    return int(np.argmax(row))


def labels_from_probabilities(table: LabelProbabilityTable) -> np.ndarray:
    """Collapse each probability row to its argmax class."""
    return np.argmax(table.rows, axis=1).astype(np.int64)


def filter_top_k_classes(dataset: GroupedDataset, k: int) -> GroupedDataset:
    """Keep only points from the k most-populated classes, densely re-indexed.

    Classes are ranked by descending count (ties to the lower original class
    index) and renamed 0..k-1 in that order.  Relative point order is
    preserved.
    """
    if dataset.class_labels is None:
        raise InvalidParameterError("dataset has no class labels")
    if k < 1:
        raise InvalidParameterError("k must be >= 1")
    labels = dataset.class_labels
    classes, counts = np.unique(labels, return_counts=True)
    if classes.size < k:
        raise InvalidParameterError(
            f"only {classes.size} distinct classes present, need {k}"
        )
    # Sort by (-count, class index) => largest first, ties to lower index.
    order = np.lexsort((classes, -counts))
    kept = classes[order[:k]]
    rename = {int(c): new for new, c in enumerate(kept)}
    mask = np.isin(labels, kept)
    rows = np.nonzero(mask)[0]
    out = dataset.subset(rows)
    new_labels = np.array([rename[int(c)] for c in out.class_labels], dtype=np.int64)
    out.class_labels = new_labels
    out.num_classes = k
    if dataset.task_kind.is_classification:
        out.targets = new_labels.astype(float).reshape(-1, 1)
    return out


@dataclass(frozen=True)
class SyntheticConfig:
    """Grouped synthetic task: Gaussian feature blobs with per-group affine
    target maps, plus a class label correlated with the group by ``rho``.

    rho=1 makes the label identical to the group; rho=0 makes it an
    independent uniform draw, so class-based splits carry no information
    about the learning target.
    """

    num_groups: int = 16
    feature_dim: int = 8
    target_dim: int = 4
    num_points: int = 2000
    feature_noise: float = 0.25
    target_noise: float = 0.02
    label_correlation: float = 0.0
    num_classes: int | None = None  # defaults to num_groups
    task_kind: TaskKind = TaskKind.REGRESSION_MSE

    def resolved_num_classes(self) -> int:
        return self.num_groups if self.num_classes is None else self.num_classes


def generate_synthetic_grouped(config: SyntheticConfig, rng: RngStream) -> GroupedDataset:
    """Draw a grouped dataset; identical config+stream give identical data."""
    g = config.num_groups
    if g < 2:
        raise InvalidParameterError("need at least 2 groups")
    if config.num_points < g:
        raise InvalidParameterError("need at least one point per group")
    if not 0.0 <= config.label_correlation <= 1.0:
        raise InvalidParameterError("label correlation must be in [0, 1]")
    for name in ("feature_noise", "target_noise"):
        v = getattr(config, name)
        if not np.isfinite(v) or v < 0:
            raise InvalidParameterError(f"{name} must be finite and >= 0")

    d, m, n = config.feature_dim, config.target_dim, config.num_points
    centers = rng.derive("centers").normals((g, d))
    centers = _spread_centers(centers, 4.0 * config.feature_noise)

    maps_stream = rng.derive("maps")
    weight_maps = maps_stream.normals((g, m, d)) / np.sqrt(d)
    biases = maps_stream.normals((g, m))

    groups = rng.derive("groups").categorical_many(np.full(g, 1.0 / g), n)
    features = centers[groups] + config.feature_noise * rng.derive("fnoise").normals((n, d))
    targets = (
        np.einsum("nij,nj->ni", weight_maps[groups], features)
        + biases[groups]
        + config.target_noise * rng.derive("tnoise").normals((n, m))
    )

    num_classes = config.resolved_num_classes()
    rho = config.label_correlation
    label_stream = rng.derive("labels")
    keep = label_stream.uniforms(n) < rho
    random_labels = label_stream.categorical_many(np.full(num_classes, 1.0 / num_classes), n)
    class_labels = np.where(keep, groups % num_classes, random_labels).astype(np.int64)

    if config.task_kind.is_classification:
        targets = class_labels.astype(float).reshape(-1, 1)

    return GroupedDataset(
        ids=np.arange(n, dtype=np.int64),
        features=features,
        targets=targets,
        task_kind=config.task_kind,
        num_classes=num_classes,
        class_labels=class_labels,
        latent_groups=groups.astype(np.int64),
    )


def _spread_centers(centers: np.ndarray, min_distance: float) -> np.ndarray:
    """Scale raw centers so every pairwise distance is >= min_distance."""
    if min_distance <= 0:
        return centers
    diff = centers[:, None, :] - centers[None, :, :]
    dist = np.sqrt((diff**2).sum(axis=2))
    np.fill_diagonal(dist, np.inf)
    current = float(dist.min())
    if current <= 0:
        raise InvalidParameterError("degenerate coincident group centers")
    if current < min_distance:
        centers = centers * (min_distance / current)
    return centers


# -- file I/O ----------------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def save_dataset(dataset: GroupedDataset, path) -> None:
    path = Path(path)
    d, m = dataset.feature_dim, dataset.target_dim
    header = (
        ["id"]
        + [f"feat{i}" for i in range(d)]
        + [f"tgt{i}" for i in range(m)]
        + ["class", "group"]
    )
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerow(["#task", dataset.task_kind.value, dataset.num_classes or ""])
        for i in range(len(dataset)):
            row = [str(int(dataset.ids[i]))]
            row += [_fmt(v) for v in dataset.features[i]]
            row += [_fmt(v) for v in dataset.targets[i]]
            row.append("" if dataset.class_labels is None else str(int(dataset.class_labels[i])))
            row.append("" if dataset.latent_groups is None else str(int(dataset.latent_groups[i])))
            writer.writerow(row)


def load_dataset(path) -> GroupedDataset:
    path = Path(path)
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", line=1) from None
        d, m = _parse_header(header)
        width = 1 + d + m + 2
        task_kind, num_classes = TaskKind.REGRESSION_MSE, None
        ids, feats, tgts, classes, groups, linenos = [], [], [], [], [], []
        lineno = 1
        for row in reader:
            lineno += 1
            if row and row[0] == "#task":
                task_kind = TaskKind(row[1])
                num_classes = int(row[2]) if row[2] else None
                continue
            if len(row) != width:
                raise ParseError(
                    f"expected {width} cells, found {len(row)}", line=lineno
                )
            try:
                ids.append(int(row[0]))
                feats.append([float(v) for v in row[1 : 1 + d]])
                tgts.append([float(v) for v in row[1 + d : 1 + d + m]])
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno) from None
            classes.append(None if row[1 + d + m] == "" else int(row[1 + d + m]))
            groups.append(None if row[2 + d + m] == "" else int(row[2 + d + m]))
            linenos.append(lineno)
    if not ids:
        raise ParseError("file contains no datapoints", line=2)
    id_arr = np.array(ids, dtype=np.int64)
    dup = _first_duplicate(id_arr)
    if dup is not None:
        raise ParseError(f"duplicate id {id_arr[dup]}", line=linenos[dup])
    has_class = any(c is not None for c in classes)
    has_group = any(g is not None for g in groups)
    if has_class and not all(c is not None for c in classes):
        raise ParseError("class column is partially filled")
    if has_group and not all(g is not None for g in groups):
        raise ParseError("group column is partially filled")
    return GroupedDataset(
        ids=id_arr,
        features=np.array(feats, dtype=float),
        targets=np.array(tgts, dtype=float),
        task_kind=task_kind,
        num_classes=num_classes,
        class_labels=np.array(classes, dtype=np.int64) if has_class else None,
        latent_groups=np.array(groups, dtype=np.int64) if has_group else None,
    )


def _parse_header(header: list[str]) -> tuple[int, int]:
    if not header or header[0] != "id" or header[-2:] != ["class", "group"]:
        raise ParseError("malformed header", line=1)
    d = sum(1 for h in header if h.startswith("feat"))
    m = sum(1 for h in header if h.startswith("tgt"))
    expect = (
        ["id"]
        + [f"feat{i}" for i in range(d)]
        + [f"tgt{i}" for i in range(m)]
        + ["class", "group"]
    )
    if header != expect:
        raise ParseError("malformed header", line=1)
    return d, m


def _first_duplicate(ids: np.ndarray) -> int | None:
    seen = set()
    for i, v in enumerate(ids):
        if int(v) in seen:
            return i
        seen.add(int(v))
    return None


def save_label_table(table: LabelProbabilityTable, path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id"] + [f"p{j}" for j in range(table.rows.shape[1])])
        for i in range(table.ids.shape[0]):
            writer.writerow([str(int(table.ids[i]))] + [_fmt(v) for v in table.rows[i]])


def load_label_table(path) -> LabelProbabilityTable:
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
    return LabelProbabilityTable(np.array(ids, dtype=np.int64), np.array(rows, dtype=float))
