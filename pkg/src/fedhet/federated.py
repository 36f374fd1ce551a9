"""Round-based federated training: FedAvg, FedProx, SCAFFOLD, FedRep, FedAmp.

Every round broadcasts the server state, runs K local mini-batch SGD steps
on all clients, and aggregates.  Per-method behavior:

* FedAvg      - plain local SGD, datapoint-weighted model average.
* FedProx     - local gradient gains mu * (local - global).
* SCAFFOLD    - local gradient gains (server variate - client variate);
                client variates refreshed from the realized update
                (option-II), server variate is their unweighted mean.
* FedRep      - decoder-output layer is personalized: the first half of the
                local steps trains only that layer, the rest only the shared
                layers; aggregation never touches the personalized values.
* FedAmp      - clients keep persistent local models pulled toward a
                personalized target u_n, the similarity-weighted mixture of
                all client models (softmax over negative decoder distances,
                with fixed self-weight beta).

Determinism: every stochastic choice draws from a stream derived from
(seed, purpose, client, round), so client execution order cannot change any
result.  Validation is 10% of each shard; personalized methods report their
own model's validation loss, global-model methods the global model's.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field

import numpy as np

from .data import GroupedDataset, TaskKind
from .errors import DivergedClientError, InvalidParameterError, ShapeError
from .nn import (
    DECODER_BODY,
    DECODER_OUTPUT,
    ENCODER,
    Architecture,
    LossKind,
    ModelParams,
    backward,
    batch_loss,
    forward,
    init_params,
    role_mask,
)
from .partition import PartitionPlan
from .rng import RngStream


class FlMethod(enum.Enum):
    FEDAVG = "fedavg"
    FEDPROX = "fedprox"
    SCAFFOLD = "scaffold"
    FEDREP = "fedrep"
    FEDAMP = "fedamp"


PERSONALIZED_METHODS = (FlMethod.FEDREP, FlMethod.FEDAMP)

LOSS_FOR_TASK = {
    TaskKind.REGRESSION_L1: LossKind.L1,
    TaskKind.REGRESSION_MSE: LossKind.MSE,
    TaskKind.CLASSIFICATION_CE: LossKind.CROSS_ENTROPY,
}


@dataclass(frozen=True)
class FlConfig:
    method: FlMethod = FlMethod.FEDAVG
    rounds: int = 20
    local_steps: int = 100
    batch_size: int = 16
    lr0: float = 1e-4
    lr_decay: float = 0.99
    mu: float = 0.01          # FedProx proximal coefficient
    lam: float = 0.1          # FedAmp pull strength
    sigma: float = 1.0        # FedAmp similarity temperature
    self_weight: float = 0.5  # FedAmp diagonal mass
    seed: int = 0

    def __post_init__(self):
        if self.rounds < 0 or self.local_steps < 1 or self.batch_size < 1:
            raise InvalidParameterError("rounds/local_steps/batch_size out of range")
        if self.lr0 <= 0 or not 0 < self.lr_decay <= 1:
            raise InvalidParameterError("invalid learning-rate schedule")
        if self.mu < 0 or self.lam <= 0 or self.sigma <= 0:
            raise InvalidParameterError("invalid method coefficient")
        if not 0 <= self.self_weight < 1:
            raise InvalidParameterError("self weight must be in [0, 1)")

    @property
    def head_steps(self) -> int:
        return self.local_steps // 2


def lr_schedule(lr0: float, gamma: float, round_index: int) -> float:
    """Exponential decay per global round."""
    if round_index < 0:
        raise InvalidParameterError("round index must be >= 0")
    return lr0 * gamma**round_index


@dataclass
class ClientState:
    client: int
    train_rows: np.ndarray
    val_rows: np.ndarray
    local_params: ModelParams
    control: ModelParams | None = None       # SCAFFOLD c_n
    personal_target: ModelParams | None = None  # FedAmp u_n

    @property
    def size(self) -> int:
        return int(self.train_rows.size + self.val_rows.size)


@dataclass
class RoundRecord:
    round_index: int
    global_val_loss: float
    train_losses: list[float]
    val_losses: list[float]
    lr: float
    wall_time: float


@dataclass
class ExperimentResult:
    records: list[RoundRecord]
    global_params: ModelParams
    clients: list[ClientState]
    error: DivergedClientError | None = None


def split_shard(rows: np.ndarray, rng: RngStream) -> tuple[np.ndarray, np.ndarray]:
    """Train/validation split: 10% validation, at least 1 point each side.

    Single-point shards keep their point for training and get an empty
    validation split (such clients are skipped when averaging val losses).
    """
    n = rows.size
    if n == 0:
        raise InvalidParameterError("client shard is empty")
    if n == 1:
        return rows.copy(), rows[:0]
    n_val = min(n - 1, max(1, round(0.1 * n)))
    perm = rng.permutation(n)
    return rows[perm[n_val:]], rows[perm[:n_val]]


def aggregate_weighted(models: list[ModelParams], sizes) -> ModelParams:
    """Datapoint-weighted elementwise mean: sum_n (D_n / D) * params_n."""
    if not models:
        raise InvalidParameterError("nothing to aggregate")
    layout = models[0].layout
    sizes = np.asarray(sizes, dtype=float)
    if sizes.shape[0] != len(models) or np.any(sizes < 1):
        raise InvalidParameterError("need one positive size per model")
    total = sizes.sum()
    acc = np.zeros_like(models[0].values)
    for m, s in zip(models, sizes):
        if m.layout != layout:
            raise ShapeError("cannot aggregate models with different layouts")
        acc += (s / total) * m.values
    return ModelParams(acc, layout)


def scaffold_server_update(variates: list[ModelParams]) -> ModelParams:
    """Unweighted mean of the client control variates."""
    if not variates:
        raise InvalidParameterError("no variates to average")
    layout = variates[0].layout
    acc = np.zeros_like(variates[0].values)
    for v in variates:
        if v.layout != layout:
            raise ShapeError("variate layouts disagree")
        acc += v.values
    return ModelParams(acc / len(variates), layout)


def fedamp_weights(models: list[ModelParams], sigma: float, self_weight: float = 0.5) -> np.ndarray:
    """Row-stochastic similarity matrix from decoder-parameter distances.

    Off-diagonal row n is softmax over m != n of -||decoder_n - decoder_m||^2
    / sigma, scaled by (1 - self_weight); the diagonal keeps self_weight so a
    client's personalized target never collapses to the neighborhood mean.
    """
    if sigma <= 0:
        raise InvalidParameterError("sigma must be positive")
    n = len(models)
    if n < 2:
        raise InvalidParameterError("need at least 2 clients")
    mask = role_mask(models[0].layout, DECODER_BODY, DECODER_OUTPUT)
    decoders = np.stack([m.values[mask] for m in models])
    sq = (decoders**2).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * decoders @ decoders.T, 0.0)
    weights = np.zeros((n, n))
    for i in range(n):
        logits = -d2[i] / sigma
        logits[i] = -np.inf
        e = np.exp(logits - logits[np.arange(n) != i].max())
        e[i] = 0.0
        weights[i] = (1.0 - self_weight) * e / e.sum()
        weights[i, i] = self_weight
    return weights


def _batch_rows(train_rows: np.ndarray, batch_size: int, rng: RngStream) -> np.ndarray:
    k = min(batch_size, train_rows.size)
    return train_rows[rng.index_sample(train_rows.size, k)]


def local_train(
    state: ClientState,
    global_params: ModelParams,
    dataset: GroupedDataset,
    arch: Architecture,
    config: FlConfig,
    round_index: int,
    rng: RngStream,
    server_control: ModelParams | None = None,
) -> tuple[ModelParams, float]:
    """K local mini-batch steps; returns (new local params, mean train loss)."""
    method = config.method
    kind = LOSS_FOR_TASK[dataset.task_kind]
    lr = lr_schedule(config.lr0, config.lr_decay, round_index)

    if method in (FlMethod.FEDAVG, FlMethod.FEDPROX, FlMethod.SCAFFOLD):
        omega = global_params.clone()
    elif method is FlMethod.FEDREP:
        omega = state.local_params.clone()
        for start, stop in omega.role_ranges(ENCODER, DECODER_BODY):
            omega.values[start:stop] = global_params.values[start:stop]
    else:  # FedAmp: continue from the previous local model
        omega = state.local_params.clone()

    shared_ranges = omega.role_ranges(ENCODER, DECODER_BODY)
    head_ranges = omega.role_ranges(DECODER_OUTPUT)
    grad_buf = np.zeros_like(omega.values)
    loss_sum = 0.0

    for k in range(config.local_steps):
        rows = _batch_rows(state.train_rows, config.batch_size, rng)
        grad, value = backward(
            omega, arch, dataset.features[rows], dataset.targets[rows], kind,
            grad_out=grad_buf,
        )
        if not np.isfinite(value):
            raise DivergedClientError(state.client, round_index)
        loss_sum += value

        if method is FlMethod.FEDPROX and config.mu != 0.0:
            grad = grad + config.mu * (omega.values - global_params.values)
        elif method is FlMethod.SCAFFOLD:
            correction = server_control.values - state.control.values
            if correction.any():
                grad = grad + correction
        elif method is FlMethod.FEDAMP:
            grad = grad + config.lam * (omega.values - state.personal_target.values)

        if method is FlMethod.FEDREP:
            ranges = head_ranges if k < config.head_steps else shared_ranges
            for start, stop in ranges:
                omega.values[start:stop] -= lr * grad[start:stop]
        else:
            omega.values -= lr * grad

    if method is FlMethod.SCAFFOLD:
        # Option-II variate refresh: c_n <- c_n - c + (global - local) / (K * lr)
        state.control = ModelParams(
            state.control.values
            - server_control.values
            + (global_params.values - omega.values) / (config.local_steps * lr),
            omega.layout,
        )
    return omega, loss_sum / config.local_steps


def _mean_val_loss(
    params: ModelParams, arch: Architecture, dataset: GroupedDataset,
    rows: np.ndarray, kind: LossKind,
) -> float:
    outputs, _ = forward(params, arch, dataset.features[rows])
    return batch_loss(kind, outputs, dataset.targets[rows])


def run_federated(
    dataset: GroupedDataset,
    plan: PartitionPlan,
    arch: Architecture,
    config: FlConfig,
) -> ExperimentResult:
    """T rounds of broadcast -> local training -> aggregation.

    All clients participate every round.  A diverged client aborts the run;
    the records gathered so far are preserved on the result.
    """
    kind = LOSS_FOR_TASK[dataset.task_kind]
    root = RngStream(config.seed)
    global_params = init_params(arch, root.derive("init"))

    clients: list[ClientState] = []
    for n in range(plan.num_clients):
        rows = plan.client_rows(n)
        if rows.size == 0:
            raise InvalidParameterError(f"client {n} has no datapoints")
        train_rows, val_rows = split_shard(rows, root.derive("valsplit", n))
        clients.append(
            ClientState(
                client=n,
                train_rows=train_rows,
                val_rows=val_rows,
                local_params=global_params.clone(),
                control=global_params.zeros_like()
                if config.method is FlMethod.SCAFFOLD else None,
                personal_target=global_params.clone()
                if config.method is FlMethod.FEDAMP else None,
            )
        )
    sizes = [c.size for c in clients]
    server_control = (
        global_params.zeros_like() if config.method is FlMethod.SCAFFOLD else None
    )

    records: list[RoundRecord] = []
    error: DivergedClientError | None = None
    for t in range(config.rounds):
        started = time.perf_counter()
        lr = lr_schedule(config.lr0, config.lr_decay, t)
        train_losses = []
        try:
            for state in clients:
                new_local, mean_loss = local_train(
                    state, global_params, dataset, arch, config, t,
                    root.derive("batch", state.client, t),
                    server_control=server_control,
                )
                state.local_params = new_local
                train_losses.append(mean_loss)
        except DivergedClientError as exc:
            error = exc
            break

        method = config.method
        if method in (FlMethod.FEDAVG, FlMethod.FEDPROX, FlMethod.SCAFFOLD):
            global_params = aggregate_weighted([c.local_params for c in clients], sizes)
            if method is FlMethod.SCAFFOLD:
                server_control = scaffold_server_update([c.control for c in clients])
        elif method is FlMethod.FEDREP:
            aggregated = aggregate_weighted([c.local_params for c in clients], sizes)
            for start, stop in global_params.role_ranges(ENCODER, DECODER_BODY):
                global_params.values[start:stop] = aggregated.values[start:stop]
        else:  # FedAmp
            weights = fedamp_weights(
                [c.local_params for c in clients], config.sigma, config.self_weight
            )
            stacked = np.stack([c.local_params.values for c in clients])
            targets = weights @ stacked
            for i, state in enumerate(clients):
                state.personal_target = ModelParams(targets[i], global_params.layout)
            global_params = aggregate_weighted([c.local_params for c in clients], sizes)

        val_losses = []
        for state in clients:
            if state.val_rows.size == 0:
                val_losses.append(np.nan)
                continue
            if method is FlMethod.FEDREP:
                eval_params = state.local_params.clone()
                for start, stop in eval_params.role_ranges(ENCODER, DECODER_BODY):
                    eval_params.values[start:stop] = global_params.values[start:stop]
            elif method is FlMethod.FEDAMP:
                eval_params = state.local_params
            else:
                eval_params = global_params
            val_losses.append(
                _mean_val_loss(eval_params, arch, dataset, state.val_rows, kind)
            )
        finite = [v for v in val_losses if np.isfinite(v)]
        records.append(
            RoundRecord(
                round_index=t,
                global_val_loss=float(np.mean(finite)),
                train_losses=train_losses,
                val_losses=val_losses,
                lr=lr,
                wall_time=time.perf_counter() - started,
            )
        )

    return ExperimentResult(
        records=records, global_params=global_params, clients=clients, error=error
    )
