"""Dirichlet allocation of datapoints to clients, by class or by cluster.

Both modes share one mechanism: a prior over groups (class labels or
embedding clusters), one Dirichlet(alpha * prior) ratio vector per client,
then a column-normalized categorical assignment so each group's points are
split across clients proportionally to the clients' appetite for that group.
When the clusters coincide with the class labels the two modes produce the
identical plan on the same seed.

Partition files are ``id,client,group``; summaries are per-client rows of
size, top-2 group mass, and the group histogram, with mean/min/max aggregate
rows appended.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import GroupedDataset
from .errors import AllocationError, InvalidParameterError, ParseError
from .rng import RngStream, check_simplex


class PartitionMode(enum.Enum):
    CLASS_BASED = "class"
    EMBEDDING_BASED = "embedding"


@dataclass(frozen=True)
class PartitionConfig:
    num_clients: int = 25
    alpha: float = 1000.0
    mode: PartitionMode = PartitionMode.EMBEDDING_BASED
    seed: int = 0

    def __post_init__(self):
        if self.num_clients < 2:
            raise InvalidParameterError("need at least 2 clients")
        if not np.isfinite(self.alpha) or self.alpha <= 0:
            raise InvalidParameterError("alpha must be positive and finite")


@dataclass
class PartitionPlan:
    """id -> client assignment plus the ratio vectors that produced it."""

    ids: np.ndarray        # (n,)
    clients: np.ndarray    # (n,) client index per datapoint
    groups: np.ndarray     # (n,) group index per datapoint
    ratios: np.ndarray     # (N, G) per-client group-ratio rows
    num_clients: int

    def client_rows(self, client: int) -> np.ndarray:
        return np.nonzero(self.clients == client)[0]

    def sizes(self) -> np.ndarray:
        return np.bincount(self.clients, minlength=self.num_clients)


def group_prior(group_of: np.ndarray) -> np.ndarray:
    """Share of points in each group 0..G-1."""
    groups = np.asarray(group_of, dtype=np.int64)
    if groups.size == 0:
        raise InvalidParameterError("no points to build a prior from")
    if groups.min() < 0:
        raise InvalidParameterError("group indices must be >= 0")
    counts = np.bincount(groups)
    return counts / counts.sum()


def client_group_ratios(
    prior: np.ndarray, alpha: float, num_clients: int, rng: RngStream
) -> np.ndarray:
    """N independent Dirichlet(alpha * prior) rows.

    Groups with exactly zero prior mass are excluded from the draw and
    reinserted as exact zeros (Dirichlet parameters must be positive).
    """
    prior = np.asarray(prior, dtype=float)
    check_simplex(prior)
    if not np.isfinite(alpha) or alpha <= 0:
        raise InvalidParameterError("alpha must be positive and finite")
    nonzero = prior > 0.0
    if not nonzero.any():
        raise InvalidParameterError("prior has no mass")
    alpha_vec = alpha * prior[nonzero]
    ratios = np.zeros((num_clients, prior.size))
    for n in range(num_clients):
        ratios[n, nonzero] = rng.dirichlet(alpha_vec)
    return ratios


def assign_datapoints(
    group_of: np.ndarray, ratios: np.ndarray, rng: RngStream, ids: np.ndarray | None = None
) -> PartitionPlan:
    """Column-normalized categorical assignment, then empty-client repair.

    For each group g, point p goes to client n with probability
    ratios[n, g] / sum_m ratios[m, g].  Any client left empty steals one
    point from the currently largest client until every client is non-empty.
    """
    groups = np.asarray(group_of, dtype=np.int64)
    num_clients, num_groups = ratios.shape
    if groups.size and groups.max() >= num_groups:
        raise InvalidParameterError("group index exceeds ratio columns")
    if ids is None:
        ids = np.arange(groups.size, dtype=np.int64)

    clients = np.full(groups.size, -1, dtype=np.int64)
    for g in range(num_groups):
        members = np.nonzero(groups == g)[0]
        if members.size == 0:
            continue
        column = ratios[:, g]
        total = column.sum()
        if total <= 0.0:
            raise AllocationError(f"group {g} has points but zero ratio mass")
        clients[members] = rng.categorical_many(column / total, members.size)

    _repair_empty_clients(clients, ids, num_clients)
    return PartitionPlan(
        ids=ids.copy(),
        clients=clients,
        groups=groups.copy(),
        ratios=ratios,
        num_clients=num_clients,
    )


def _repair_empty_clients(clients: np.ndarray, ids: np.ndarray, num_clients: int) -> None:
    """Move one point (highest id) from the largest client to each empty one."""
    while True:
        sizes = np.bincount(clients, minlength=num_clients)
        empties = np.nonzero(sizes == 0)[0]
        if empties.size == 0:
            return
        donor = int(sizes.argmax())
        if sizes[donor] <= 1:
            raise AllocationError("not enough points to populate every client")
        donor_rows = np.nonzero(clients == donor)[0]
        victim = donor_rows[np.argmax(ids[donor_rows])]
        clients[victim] = empties[0]


def partition_by_groups(
    group_of: np.ndarray, config: PartitionConfig, ids: np.ndarray | None = None
) -> PartitionPlan:
    """Shared machinery behind both partition modes.

    The random streams are derived from the seed alone (not the mode), so
    identical group maps yield identical plans in either mode.
    """
    root = RngStream(config.seed)
    prior = group_prior(group_of)
    ratios = client_group_ratios(
        prior, config.alpha, config.num_clients, root.derive("ratios")
    )
    return assign_datapoints(group_of, ratios, root.derive("assign"), ids=ids)


def class_based_partition(dataset: GroupedDataset, config: PartitionConfig) -> PartitionPlan:
    """Groups are the dataset's class labels."""
    if dataset.class_labels is None:
        raise InvalidParameterError("dataset has no class labels")
    return partition_by_groups(dataset.class_labels, config, ids=dataset.ids)


def embedding_based_partition(
    dataset: GroupedDataset, cluster_ids: np.ndarray, cluster_of: np.ndarray,
    config: PartitionConfig,
) -> PartitionPlan:
    """Groups are embedding-cluster indices, aligned to the dataset by id."""
    if cluster_ids.shape[0] != len(dataset):
        raise InvalidParameterError("cluster assignment does not cover the dataset")
    order = dataset.rows_for_ids(cluster_ids)
    group_of = np.empty(len(dataset), dtype=np.int64)
    group_of[order] = cluster_of
    return partition_by_groups(group_of, config, ids=dataset.ids)


@dataclass
class ClientSummary:
    client: int
    size: int
    histogram: np.ndarray
    top2_mass: float


@dataclass
class HeterogeneitySummary:
    per_client: list[ClientSummary]
    mean_size: float
    min_size: int
    max_size: int
    mean_top2: float
    min_top2: float
    max_top2: float


def heterogeneity_summary(plan: PartitionPlan) -> HeterogeneitySummary:
    """Exact per-client group histograms plus population aggregates."""
    num_groups = plan.ratios.shape[1]
    per_client = []
    for n in range(plan.num_clients):
        rows = plan.client_rows(n)
        hist = np.bincount(plan.groups[rows], minlength=num_groups)
        size = int(rows.size)
        top2 = float(np.sort(hist)[-2:].sum() / size) if size else 0.0
        per_client.append(ClientSummary(n, size, hist, top2))
    sizes = np.array([c.size for c in per_client])
    top2s = np.array([c.top2_mass for c in per_client])
    return HeterogeneitySummary(
        per_client=per_client,
        mean_size=float(sizes.mean()),
        min_size=int(sizes.min()),
        max_size=int(sizes.max()),
        mean_top2=float(top2s.mean()),
        min_top2=float(top2s.min()),
        max_top2=float(top2s.max()),
    )


# -- files --------------------------------------------------------------------


def save_partition(plan: PartitionPlan, path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "client", "group"])
        for i in range(plan.ids.shape[0]):
            writer.writerow(
                [str(int(plan.ids[i])), str(int(plan.clients[i])), str(int(plan.groups[i]))]
            )


def load_partition(path, num_clients: int | None = None) -> PartitionPlan:
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", line=1) from None
        if header != ["id", "client", "group"]:
            raise ParseError("malformed header", line=1)
        ids, clients, groups = [], [], []
        lineno = 1
        for row in reader:
            lineno += 1
            if len(row) != 3:
                raise ParseError("ragged row", line=lineno)
            ids.append(int(row[0]))
            clients.append(int(row[1]))
            groups.append(int(row[2]))
    if not ids:
        raise ParseError("file contains no rows", line=2)
    clients_arr = np.array(clients, dtype=np.int64)
    groups_arr = np.array(groups, dtype=np.int64)
    n_clients = num_clients if num_clients is not None else int(clients_arr.max()) + 1
    num_groups = int(groups_arr.max()) + 1
    # Ratio rows are not persisted; reconstruct the empirical ones.
    ratios = np.zeros((n_clients, num_groups))
    for n in range(n_clients):
        hist = np.bincount(groups_arr[clients_arr == n], minlength=num_groups)
        total = hist.sum()
        if total:
            ratios[n] = hist / total
    return PartitionPlan(
        ids=np.array(ids, dtype=np.int64),
        clients=clients_arr,
        groups=groups_arr,
        ratios=ratios,
        num_clients=n_clients,
    )


def save_summary(summary: HeterogeneitySummary, path) -> None:
    num_groups = summary.per_client[0].histogram.shape[0] if summary.per_client else 0
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["client", "size", "top2_mass"] + [f"g{g}" for g in range(num_groups)])
        for c in summary.per_client:
            writer.writerow(
                [str(c.client), str(c.size), repr(float(c.top2_mass))]
                + [str(int(v)) for v in c.histogram]
            )
        writer.writerow(["mean", repr(summary.mean_size), repr(summary.mean_top2)] + [""] * num_groups)
        writer.writerow(["min", str(summary.min_size), repr(summary.min_top2)] + [""] * num_groups)
        writer.writerow(["max", str(summary.max_size), repr(summary.max_top2)] + [""] * num_groups)
