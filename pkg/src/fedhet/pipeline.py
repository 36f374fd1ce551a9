"""End-to-end pipelines behind the CLI verbs.

Stage outputs live under the configured output directory::

    dataset.csv                         generate
    groups.csv                          generate (ground-truth groups, cluster-file format)
    model.ckpt, embeddings.csv          embed
    clusters_seed{s}.csv                embed, one per K-means seed
    partitions/{mode}_alpha{a}_seed{s}.csv      partition
    partitions/summary_{mode}_alpha{a}_seed{s}.csv
    rounds/{method}_{mode}_alpha{a}_seed{s}.csv train
    models/{method}_{mode}_alpha{a}_seed{s}.ckpt
    analysis/plot_{mode}_{method}.csv           analyze (Fig.-style loss-vs-round data)
    analysis/heatmap.csv, cross_seed.csv, metrics.csv, gaps.csv
    manifest.json                       report (appends one version per run)

Every file is written to a temporary sibling and atomically renamed, and all
randomness is derived from the master seed, so byte-identical reruns are the
expected behavior (pass reproducible=True to also drop manifest timestamps).
"""

from __future__ import annotations

import csv
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    Clustering,
    TaskMetric,
    cross_seed_aggregate,
    similarity_heatmap,
    task_metric,
)
from .clustering import (
    extract_embeddings,
    kmeans_fit,
    load_clusters,
    load_embeddings,
    save_clusters,
    save_embeddings,
)
from .config import ExperimentConfig, format_alpha
from .data import (
    GroupedDataset,
    TaskKind,
    generate_synthetic_grouped,
    load_dataset,
    save_dataset,
)
from .errors import ConfigError
from .federated import (
    LOSS_FOR_TASK,
    ExperimentResult,
    FlConfig,
    FlMethod,
    run_federated,
)
from .nn import Architecture, backward, forward, batch_loss, init_params, load_params, save_params
from .partition import (
    PartitionConfig,
    PartitionMode,
    class_based_partition,
    embedding_based_partition,
    heterogeneity_summary,
    load_partition,
    save_partition,
    save_summary,
)
from .rng import RngStream, derive_stream_id


def _fmt(x: float) -> str:
    return repr(float(x))


def _atomic_write(path: Path, writer) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    writer(tmp)
    os.replace(tmp, path)


def _cell_name(method: str, mode: str, alpha: float, seed: int) -> str:
    return f"{method}_{mode}_alpha{format_alpha(alpha)}_seed{seed}"


def _partition_name(mode: str, alpha: float, seed: int) -> str:
    return f"{mode}_alpha{format_alpha(alpha)}_seed{seed}"


# -- generate ------------------------------------------------------------------


def cmd_generate(config: ExperimentConfig) -> Path:
    """Write the synthetic dataset and its ground-truth group file."""
    out = config.out
    if config.dataset_path is not None:
        dataset = load_dataset(config.dataset_path)
    else:
        dataset = generate_synthetic_grouped(
            config.synthetic, RngStream(config.seed).derive("dataset")
        )
    _atomic_write(out / "dataset.csv", lambda p: save_dataset(dataset, p))
    if dataset.latent_groups is not None:
        _atomic_write(
            out / "groups.csv",
            lambda p: save_clusters(dataset.ids, dataset.latent_groups, p),
        )
    return out / "dataset.csv"


# -- embed ---------------------------------------------------------------------


def central_validation_rows(config: ExperimentConfig, n: int) -> np.ndarray:
    """Held-out rows for central early stopping, derived from the master seed."""
    count = min(config.embed_val_points, max(1, n // 10))
    perm = RngStream(config.seed).derive("central-val").permutation(n)
    return perm[:count]


def train_centrally(
    dataset: GroupedDataset,
    arch: Architecture,
    config: ExperimentConfig,
):
    """Mini-batch SGD with early stopping on a held-out validation subset.

    Stops once the validation loss has not improved for ``embed.patience``
    consecutive epochs and returns the best parameters seen.
    """
    kind = LOSS_FOR_TASK[dataset.task_kind]
    n = len(dataset)
    val_rows = central_validation_rows(config, n)
    mask = np.ones(n, dtype=bool)
    mask[val_rows] = False
    train_rows = np.nonzero(mask)[0]

    root = RngStream(config.seed).derive("central")
    params = init_params(arch, root.derive("init"))
    grad_buf = np.zeros_like(params.values)
    batch = config.embed_batch_size

    def val_loss(p):
        outputs, _ = forward(p, arch, dataset.features[val_rows])
        return batch_loss(kind, outputs, dataset.targets[val_rows])

    best = params.clone()
    best_loss = val_loss(params)
    stale = 0
    for epoch in range(config.embed_epochs):
        order = root.derive("epoch", epoch).permutation(train_rows.size)
        for start in range(0, train_rows.size, batch):
            rows = train_rows[order[start : start + batch]]
            grad, _ = backward(
                params, arch, dataset.features[rows], dataset.targets[rows], kind,
                grad_out=grad_buf,
            )
            params.values -= config.embed_lr * grad
        current = val_loss(params)
        if current < best_loss - 1e-12:
            best_loss = current
            best = params.clone()
            stale = 0
        else:
            stale += 1
            if stale >= config.embed_patience:
                break
    return best, best_loss


def cmd_embed(config: ExperimentConfig) -> list[Path]:
    """Train (or load) the task model, extract embeddings, fit K-means per seed."""
    out = config.out
    dataset = load_dataset(out / "dataset.csv")
    output_dim = (
        dataset.num_classes if dataset.task_kind.is_classification else dataset.target_dim
    )
    arch = config.architecture(dataset.feature_dim, output_dim)

    ckpt = out / "model.ckpt"
    if ckpt.exists():
        params, saved_arch = load_params(ckpt)
        if saved_arch != arch:
            raise ConfigError("existing model.ckpt does not match the configured architecture")
    else:
        params, _ = train_centrally(dataset, arch, config)
        _atomic_write(ckpt, lambda p: save_params(params, arch, p))

    embeddings = extract_embeddings(params, arch, dataset)
    _atomic_write(out / "embeddings.csv", lambda p: save_embeddings(embeddings, p))

    written = [ckpt, out / "embeddings.csv"]
    for seed in config.seeds:
        model = kmeans_fit(embeddings, k=config.embed_k, seed=seed)
        path = out / f"clusters_seed{seed}.csv"
        _atomic_write(path, lambda p, m=model: save_clusters(embeddings.ids, m.assignments, p))
        written.append(path)
    return written


# -- partition -------------------------------------------------------------------


def partition_seed(master_seed: int, alpha: float, replicate: int) -> int:
    """Partition stream id; mode is deliberately excluded so that identical
    group maps give identical plans in both modes."""
    return derive_stream_id(master_seed, "partition", format_alpha(alpha), replicate)


def cmd_partition(config: ExperimentConfig) -> list[Path]:
    out = config.out
    dataset = load_dataset(out / "dataset.csv")
    written = []
    for mode in config.modes:
        for alpha in config.alphas:
            for seed in config.seeds:
                pconf = PartitionConfig(
                    num_clients=config.num_clients,
                    alpha=alpha,
                    mode=mode,
                    seed=partition_seed(config.seed, alpha, seed),
                )
                if mode is PartitionMode.CLASS_BASED:
                    plan = class_based_partition(dataset, pconf)
                else:
                    cids, cof = load_clusters(out / f"clusters_seed{seed}.csv")
                    plan = embedding_based_partition(dataset, cids, cof, pconf)
                name = _partition_name(mode.value, alpha, seed)
                ppath = out / "partitions" / f"{name}.csv"
                spath = out / "partitions" / f"summary_{name}.csv"
                _atomic_write(ppath, lambda p, pl=plan: save_partition(pl, p))
                summary = heterogeneity_summary(plan)
                _atomic_write(spath, lambda p, s=summary: save_summary(s, p))
                written += [ppath, spath]
    return written


# -- train -----------------------------------------------------------------------


def fl_seed(master_seed: int, mode: str, alpha: float, replicate: int) -> int:
    """FL stream id; method is deliberately excluded so methods on the same
    cell share initialization and batch order."""
    return derive_stream_id(master_seed, "fl", mode, format_alpha(alpha), replicate)


def _write_round_log(path: Path, result: ExperimentResult) -> None:
    def write(p: Path):
        with p.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["round", "global_val_loss", "mean_train_loss",
                 "min_client_val", "max_client_val", "lr"]
            )
            for rec in result.records:
                finite = [v for v in rec.val_losses if np.isfinite(v)]
                writer.writerow([
                    str(rec.round_index),
                    _fmt(rec.global_val_loss),
                    _fmt(float(np.mean(rec.train_losses))),
                    _fmt(min(finite)),
                    _fmt(max(finite)),
                    _fmt(rec.lr),
                ])

    _atomic_write(path, write)


def _train_cell(args) -> tuple[str, str, float, int, str, str]:
    """One (method, mode, alpha, seed) training job; safe for worker processes."""
    out_str, config_text, method, mode, alpha, seed = args
    from .config import parse_config_text  # local import keeps workers lean

    config = parse_config_text(config_text)
    out = Path(out_str)
    dataset = load_dataset(out / "dataset.csv")
    plan = load_partition(
        out / "partitions" / f"{_partition_name(mode, alpha, seed)}.csv",
        num_clients=config.num_clients,
    )
    output_dim = (
        dataset.num_classes if dataset.task_kind.is_classification else dataset.target_dim
    )
    arch = config.architecture(dataset.feature_dim, output_dim)
    flconf = FlConfig(
        method=FlMethod(method),
        rounds=config.fl_rounds,
        local_steps=config.fl_local_steps,
        batch_size=config.fl_batch_size,
        lr0=config.fl_lr,
        lr_decay=config.fl_lr_decay,
        mu=config.fl_mu,
        lam=config.fl_lambda,
        sigma=config.fl_sigma,
        seed=fl_seed(config.seed, mode, alpha, seed),
    )
    name = _cell_name(method, mode, alpha, seed)
    try:
        result = run_federated(dataset, plan, arch, flconf)
    except Exception as exc:  # cell failures must not sink the batch
        return (method, mode, alpha, seed, "failed", str(exc))
    _write_round_log(out / "rounds" / f"{name}.csv", result)
    _atomic_write(
        out / "models" / f"{name}.ckpt",
        lambda p: save_params(result.global_params, arch, p),
    )
    if result.error is not None:
        return (method, mode, alpha, seed, "failed", str(result.error))
    return (method, mode, alpha, seed, "ok", "")


def cmd_train(config: ExperimentConfig, jobs: int = 1) -> list[tuple]:
    """Run every configured cell; failures are recorded, not fatal."""
    args = [
        (str(config.out), config.canonical_text(), method, mode, alpha, seed)
        for (method, mode, alpha, seed) in config.cells()
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            statuses = list(pool.map(_train_cell, args))
    else:
        statuses = [_train_cell(a) for a in args]
    return statuses


# -- analyze -----------------------------------------------------------------------


def _read_round_log(path: Path) -> list[dict]:
    with path.open("r", encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_analyze(config: ExperimentConfig) -> list[Path]:
    """Emit plot data, the similarity heatmap, cross-seed and metric tables."""
    out = config.out
    analysis_dir = out / "analysis"
    dataset = load_dataset(out / "dataset.csv")
    written: list[Path] = []
    gaps: list[str] = []

    # Loss-vs-round plot data, one file per (mode, method), seed-mean curves.
    for mode in config.modes:
        for method in config.methods:
            columns: dict[float, list[float]] = {}
            for alpha in config.alphas:
                per_seed = []
                for seed in config.seeds:
                    log = out / "rounds" / f"{_cell_name(method.value, mode.value, alpha, seed)}.csv"
                    if not log.exists():
                        gaps.append(str(log.relative_to(out)))
                        continue
                    per_seed.append([float(r["global_val_loss"]) for r in _read_round_log(log)])
                if per_seed:
                    columns[alpha] = np.mean(np.array(per_seed), axis=0).tolist()
            if not columns:
                continue
            path = analysis_dir / f"plot_{mode.value}_{method.value}.csv"

            def write_plot(p: Path, cols=columns):
                with p.open("w", encoding="utf-8", newline="") as fh:
                    writer = csv.writer(fh)
                    writer.writerow(
                        ["round"] + [f"loss_alpha{format_alpha(a)}" for a in cols]
                    )
                    rounds = len(next(iter(cols.values())))
                    for t in range(rounds):
                        writer.writerow([str(t)] + [_fmt(cols[a][t]) for a in cols])

            _atomic_write(path, write_plot)
            written.append(path)

    # Similarity heatmap across labelings: class labels, ground-truth groups,
    # and the embedding clustering (cell = mean across K-means seeds).
    heatmap_path = _write_heatmap(config, dataset, analysis_dir, gaps)
    if heatmap_path is not None:
        written.append(heatmap_path)

    # Cross-seed aggregate of final losses.
    rows = []
    task_name = dataset.task_kind.value
    for method in config.methods:
        for mode in config.modes:
            for alpha in config.alphas:
                finals = []
                for seed in config.seeds:
                    log = out / "rounds" / f"{_cell_name(method.value, mode.value, alpha, seed)}.csv"
                    if log.exists():
                        records = _read_round_log(log)
                        if records:
                            finals.append(float(records[-1]["global_val_loss"]))
                if len(finals) >= 2:
                    mean, std = cross_seed_aggregate(finals)
                    std_cell = _fmt(std)
                elif len(finals) == 1:
                    mean, std_cell = finals[0], ""
                else:
                    continue
                rows.append(
                    [f"{task_name}/{method.value}/{mode.value}",
                     format_alpha(alpha), _fmt(mean), std_cell]
                )
    if rows:
        path = analysis_dir / "cross_seed.csv"

        def write_cross(p: Path):
            with p.open("w", encoding="utf-8", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["task", "alpha", "mean", "std"])
                writer.writerows(rows)

        _atomic_write(path, write_cross)
        written.append(path)

    # Task-specific metrics of each cell's final model on the central
    # validation rows, seed-averaged.
    metrics_path = _write_metrics(config, dataset, analysis_dir, gaps)
    if metrics_path is not None:
        written.append(metrics_path)

    if gaps:
        path = analysis_dir / "gaps.csv"

        def write_gaps(p: Path):
            with p.open("w", encoding="utf-8", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["missing"])
                for g in sorted(set(gaps)):
                    writer.writerow([g])

        _atomic_write(path, write_gaps)
        written.append(path)
    return written


def _write_heatmap(config, dataset, analysis_dir: Path, gaps: list[str]) -> Path | None:
    out = config.out
    labelings: dict[str, list[Clustering]] = {}
    if dataset.class_labels is not None:
        labelings["class"] = [Clustering.from_arrays(dataset.ids, dataset.class_labels)]
    if dataset.latent_groups is not None:
        labelings["group"] = [Clustering.from_arrays(dataset.ids, dataset.latent_groups)]
    embed_clusterings = []
    for seed in config.seeds:
        path = out / f"clusters_seed{seed}.csv"
        if path.exists():
            cids, cof = load_clusters(path)
            embed_clusterings.append(Clustering.from_arrays(cids, cof))
        else:
            gaps.append(str(path.relative_to(out)))
    if embed_clusterings:
        labelings["embedding"] = embed_clusterings
    if len(labelings) < 2:
        return None

    names = list(labelings)
    rng = RngStream(config.seed).derive("heatmap")
    # Mean ARI / mean p over all cross-seed combinations of the two labelings.
    cells: dict[tuple[str, str], tuple[float, float | None]] = {}
    for i, na in enumerate(names):
        cells[(na, na)] = (1.0, None)
        for nb in names[i + 1 :]:
            aris, ps = [], []
            for ia, ca in enumerate(labelings[na]):
                for ib, cb in enumerate(labelings[nb]):
                    grid = similarity_heatmap(
                        {na: ca, nb: cb}, config.permutations,
                        rng.derive(na, ia, nb, ib),
                    )
                    cell = grid[(na, nb)]
                    aris.append(cell.ari)
                    ps.append(cell.p_value)
            value = (float(np.mean(aris)), float(np.mean(ps)))
            cells[(na, nb)] = value
            cells[(nb, na)] = value

    path = analysis_dir / "heatmap.csv"

    def write(p: Path):
        with p.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            header = ["task"]
            for n in names:
                header += [f"ari_{n}", f"p_{n}"]
            writer.writerow(header)
            for na in names:
                row = [na]
                for nb in names:
                    ari, pv = cells[(na, nb)]
                    row += [_fmt(ari), "" if pv is None else "%.4f" % pv]
                writer.writerow(row)

    _atomic_write(path, write)
    return path


def _write_metrics(config, dataset, analysis_dir: Path, gaps: list[str]) -> Path | None:
    out = config.out
    val_rows = central_validation_rows(config, len(dataset))
    targets = dataset.targets[val_rows]
    if dataset.task_kind.is_classification:
        metric_kinds = [TaskMetric.ACCURACY]
    else:
        metric_kinds = [TaskMetric.RMSE, TaskMetric.PSNR]
    rows = []
    for method in config.methods:
        for mode in config.modes:
            for alpha in config.alphas:
                per_metric: dict[TaskMetric, list[float]] = {m: [] for m in metric_kinds}
                for seed in config.seeds:
                    ckpt = out / "models" / f"{_cell_name(method.value, mode.value, alpha, seed)}.ckpt"
                    if not ckpt.exists():
                        gaps.append(str(ckpt.relative_to(out)))
                        continue
                    params, arch = load_params(ckpt)
                    outputs, _ = forward(params, arch, dataset.features[val_rows])
                    for m in metric_kinds:
                        if m is TaskMetric.ACCURACY:
                            preds = outputs.argmax(axis=1)
                            value = task_metric(m, preds, targets[:, 0])
                        else:
                            value = task_metric(m, outputs, targets)
                        per_metric[m].append(value)
                for m in metric_kinds:
                    if per_metric[m]:
                        rows.append([
                            f"{dataset.task_kind.value}/{method.value}",
                            mode.value,
                            format_alpha(alpha),
                            m.value,
                            _fmt(float(np.mean(per_metric[m]))),
                        ])
    if not rows:
        return None
    path = analysis_dir / "metrics.csv"

    def write(p: Path):
        with p.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["task", "mode", "alpha", "metric", "value"])
            writer.writerows(rows)

    _atomic_write(path, write)
    return path


# -- report ------------------------------------------------------------------------


def cmd_report(
    config: ExperimentConfig,
    statuses: list[tuple] | None = None,
    reproducible: bool = False,
) -> Path:
    """Append one manifest version linking every output file to its cell."""
    out = config.out
    manifest_path = out / "manifest.json"
    versions = []
    if manifest_path.exists():
        versions = json.loads(manifest_path.read_text(encoding="utf-8"))

    status_by_cell = {}
    if statuses:
        for method, mode, alpha, seed, status, message in statuses:
            status_by_cell[(method, mode, alpha, seed)] = (status, message)

    cells = []
    for method, mode, alpha, seed in config.cells():
        name = _cell_name(method, mode, alpha, seed)
        log = out / "rounds" / f"{name}.csv"
        model = out / "models" / f"{name}.ckpt"
        status, message = status_by_cell.get(
            (method, mode, alpha, seed),
            ("ok", "") if log.exists() else ("missing", "no round log"),
        )
        cells.append({
            "method": method,
            "mode": mode,
            "alpha": format_alpha(alpha),
            "seed": seed,
            "status": status,
            "message": message,
            "log": str(log.relative_to(out)) if log.exists() else None,
            "model": str(model.relative_to(out)) if model.exists() else None,
        })

    files = sorted(
        str(p.relative_to(out))
        for p in out.rglob("*")
        if p.is_file() and p.name != "manifest.json" and not p.name.endswith(".tmp")
    )
    version = {
        "version": len(versions) + 1,
        "artifact": f"fedhet {__version__}",
        "config_sha256": config.digest(),
        "config": {k: v for k, v in config.raw.items() if k != "out"},
        "master_seed": config.seed,
        "reproducible": reproducible,
        "cells": cells,
        "files": files,
    }
    if not reproducible:
        version["created_unix"] = int(time.time())
    versions.append(version)

    def write(p: Path):
        p.write_text(json.dumps(versions, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    _atomic_write(manifest_path, write)
    return manifest_path


def run_all(config: ExperimentConfig, jobs: int = 1, reproducible: bool = False) -> int:
    """generate -> embed -> partition -> train -> analyze -> report.

    Returns 0 on full success, 2 when some training cells failed.
    """
    cmd_generate(config)
    cmd_embed(config)
    cmd_partition(config)
    statuses = cmd_train(config, jobs=jobs)
    cmd_analyze(config)
    cmd_report(config, statuses, reproducible=reproducible)
    failed = [s for s in statuses if s[4] != "ok"]
    return 2 if failed else 0
