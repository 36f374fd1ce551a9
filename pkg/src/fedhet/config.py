"""Experiment configuration: flat ``key = value`` text with a strict schema.

Unknown keys are rejected outright so a typo in ``partition.alphas`` or
``fl.mu`` cannot silently invalidate a comparison.  Lists are
comma-separated.  Lines starting with ``#`` and blank lines are ignored.

Schema (defaults in parentheses)::

    seed                      master seed (0)
    out                       output directory ("runs/out")
    dataset.path              load an existing dataset file instead of generating
    dataset.points            synthetic point count (2000)
    dataset.groups            latent groups (16)
    dataset.features          feature dimension (8)
    dataset.targets           target dimension (4)
    dataset.feature_noise     blob noise scale (0.25)
    dataset.target_noise      target noise scale (0.02)
    dataset.label_correlation rho in [0,1] (0.0)
    dataset.task              regression-l1 | regression-mse | classification-ce
    arch.hidden               hidden widths ("32,32")
    arch.activation           tanh | relu (tanh)
    embed.k                   K-means cluster count (16)
    embed.seeds               K-means / replicate seeds ("0,1,2")
    embed.epochs              central-training epoch cap (150)
    embed.patience            early-stopping patience (5)
    embed.batch_size          central mini-batch size (16)
    embed.lr                  central learning rate (0.05)
    embed.val_points          held-out points for early stopping (100)
    partition.clients         client count (25)
    partition.alphas          alpha list ("0.1,10,1000")
    partition.modes           class,embedding (both)
    fl.methods                fedavg,fedprox,scaffold,fedrep,fedamp
    fl.rounds                 global rounds (20)
    fl.local_steps            local SGD steps per round (100)
    fl.batch_size             local mini-batch size (16)
    fl.lr                     initial learning rate (1e-4)
    fl.lr_decay               per-round exponential decay (0.99)
    fl.mu                     FedProx coefficient (0.01)
    fl.lambda                 FedAmp pull strength (0.1)
    fl.sigma                  FedAmp similarity temperature (1.0)
    analysis.permutations     permutation count for p-values (100)
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .data import SyntheticConfig, TaskKind
from .errors import ConfigError
from .federated import FlMethod
from .nn import Architecture
from .partition import PartitionMode

_VALID_KEYS = {
    "seed", "out",
    "dataset.path", "dataset.points", "dataset.groups", "dataset.features",
    "dataset.targets", "dataset.feature_noise", "dataset.target_noise",
    "dataset.label_correlation", "dataset.task",
    "arch.hidden", "arch.activation",
    "embed.k", "embed.seeds", "embed.epochs", "embed.patience",
    "embed.batch_size", "embed.lr", "embed.val_points",
    "partition.clients", "partition.alphas", "partition.modes",
    "fl.methods", "fl.rounds", "fl.local_steps", "fl.batch_size",
    "fl.lr", "fl.lr_decay", "fl.mu", "fl.lambda", "fl.sigma",
    "analysis.permutations",
}

_DEFAULTS = {
    "seed": "0",
    "out": "runs/out",
    "dataset.points": "2000",
    "dataset.groups": "16",
    "dataset.features": "8",
    "dataset.targets": "4",
    "dataset.feature_noise": "0.25",
    "dataset.target_noise": "0.02",
    "dataset.label_correlation": "0.0",
    "dataset.task": "regression-mse",
    "arch.hidden": "32,32",
    "arch.activation": "tanh",
    "embed.k": "16",
    "embed.seeds": "0,1,2",
    "embed.epochs": "150",
    "embed.patience": "5",
    "embed.batch_size": "16",
    "embed.lr": "0.05",
    "embed.val_points": "100",
    "partition.clients": "25",
    "partition.alphas": "0.1,10,1000",
    "partition.modes": "class,embedding",
    "fl.methods": "fedavg,fedprox,scaffold,fedrep,fedamp",
    "fl.rounds": "20",
    "fl.local_steps": "100",
    "fl.batch_size": "16",
    "fl.lr": "1e-4",
    "fl.lr_decay": "0.99",
    "fl.mu": "0.01",
    "fl.lambda": "0.1",
    "fl.sigma": "1.0",
    "analysis.permutations": "100",
}


@dataclass
class ExperimentConfig:
    raw: dict[str, str]
    seed: int
    out: Path
    dataset_path: Path | None
    synthetic: SyntheticConfig
    arch_hidden: tuple[int, ...]
    arch_activation: str
    embed_k: int
    seeds: tuple[int, ...]
    embed_epochs: int
    embed_patience: int
    embed_batch_size: int
    embed_lr: float
    embed_val_points: int
    num_clients: int
    alphas: tuple[float, ...]
    modes: tuple[PartitionMode, ...]
    methods: tuple[FlMethod, ...]
    fl_rounds: int
    fl_local_steps: int
    fl_batch_size: int
    fl_lr: float
    fl_lr_decay: float
    fl_mu: float
    fl_lambda: float
    fl_sigma: float
    permutations: int

    def architecture(self, input_dim: int, output_dim: int) -> Architecture:
        return Architecture(input_dim, self.arch_hidden, self.arch_activation, output_dim)

    def canonical_text(self) -> str:
        """Sorted key=value echo of the experiment parameters.

        The output directory is a location, not a parameter, so it is
        excluded; identical experiments hash identically wherever they run.
        """
        return (
            "\n".join(f"{k} = {self.raw[k]}" for k in sorted(self.raw) if k != "out")
            + "\n"
        )

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_text().encode("utf-8")).hexdigest()

    def cells(self) -> list[tuple[str, str, float, int]]:
        """Every configured (method, mode, alpha, seed) combination."""
        return [
            (method.value, mode.value, alpha, seed)
            for method in self.methods
            for mode in self.modes
            for alpha in self.alphas
            for seed in self.seeds
        ]


def parse_config_text(text: str) -> ExperimentConfig:
    values = dict(_DEFAULTS)
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, value = stripped.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _VALID_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = value
    return _build(values)


def load_config(path) -> ExperimentConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def default_config() -> ExperimentConfig:
    return _build(dict(_DEFAULTS))


def _build(values: dict[str, str]) -> ExperimentConfig:
    try:
        task = TaskKind(values["dataset.task"])
    except ValueError:
        raise ConfigError(f"unknown dataset.task {values['dataset.task']!r}") from None
    synthetic = SyntheticConfig(
        num_groups=_int(values, "dataset.groups"),
        feature_dim=_int(values, "dataset.features"),
        target_dim=_int(values, "dataset.targets"),
        num_points=_int(values, "dataset.points"),
        feature_noise=_float(values, "dataset.feature_noise"),
        target_noise=_float(values, "dataset.target_noise"),
        label_correlation=_float(values, "dataset.label_correlation"),
        task_kind=task,
    )
    modes = []
    for token in _list(values["partition.modes"]):
        try:
            modes.append(PartitionMode(token))
        except ValueError:
            raise ConfigError(f"unknown partition mode {token!r}") from None
    methods = []
    for token in _list(values["fl.methods"]):
        try:
            methods.append(FlMethod(token))
        except ValueError:
            raise ConfigError(f"unknown FL method {token!r}") from None
    alphas = tuple(_float_token(t) for t in _list(values["partition.alphas"]))
    seeds = tuple(_int_token(t) for t in _list(values["embed.seeds"]))
    if not alphas:
        raise ConfigError("partition.alphas must be non-empty")
    if not methods:
        raise ConfigError("fl.methods must be non-empty")
    if values["arch.activation"] not in ("tanh", "relu"):
        raise ConfigError(f"unknown activation {values['arch.activation']!r}")
    return ExperimentConfig(
        raw=values,
        seed=_int(values, "seed"),
        out=Path(values["out"]),
        dataset_path=Path(values["dataset.path"]) if "dataset.path" in values else None,
        synthetic=synthetic,
        arch_hidden=tuple(_int_token(t) for t in _list(values["arch.hidden"])),
        arch_activation=values["arch.activation"],
        embed_k=_int(values, "embed.k"),
        seeds=seeds,
        embed_epochs=_int(values, "embed.epochs"),
        embed_patience=_int(values, "embed.patience"),
        embed_batch_size=_int(values, "embed.batch_size"),
        embed_lr=_float(values, "embed.lr"),
        embed_val_points=_int(values, "embed.val_points"),
        num_clients=_int(values, "partition.clients"),
        alphas=alphas,
        modes=tuple(modes),
        methods=tuple(methods),
        fl_rounds=_int(values, "fl.rounds"),
        fl_local_steps=_int(values, "fl.local_steps"),
        fl_batch_size=_int(values, "fl.batch_size"),
        fl_lr=_float(values, "fl.lr"),
        fl_lr_decay=_float(values, "fl.lr_decay"),
        fl_mu=_float(values, "fl.mu"),
        fl_lambda=_float(values, "fl.lambda"),
        fl_sigma=_float(values, "fl.sigma"),
        permutations=_int(values, "analysis.permutations"),
    )


def _list(raw: str) -> list[str]:
    return [t.strip() for t in raw.split(",") if t.strip()]


def _int(values: dict[str, str], key: str) -> int:
    return _int_token(values[key], key)


def _int_token(token: str, key: str = "") -> int:
    try:
        return int(token)
    except ValueError:
        raise ConfigError(f"{key or token!r}: expected an integer, got {token!r}") from None


def _float(values: dict[str, str], key: str) -> float:
    return _float_token(values[key], key)


def _float_token(token: str, key: str = "") -> float:
    try:
        return float(token)
    except ValueError:
        raise ConfigError(f"{key or token!r}: expected a number, got {token!r}") from None


def format_alpha(alpha: float) -> str:
    """Short stable alpha label for filenames and column headers."""
    if alpha == int(alpha):
        return str(int(alpha))
    return repr(alpha)
