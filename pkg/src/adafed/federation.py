"""Round-based federated training loop (server + simulated clients)."""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import aggregation
from .aggregation import AggregationError, AggregatorSpec, ClientUpdate
from .data import PartitionSpec, SyntheticTaskSpec, generate_synthetic, partition
from .models import Dataset, ModelSpec, accuracy, gradient, init_params, loss

logger = logging.getLogger(__name__)

SCHEDULE_KINDS = ("Constant", "InverseT", "InverseSqrtT", "StepSizeBound")
LOCAL_OPTIMIZERS = ("GD", "SGD")


class FederationError(RuntimeError):
    def __init__(self, round_index: int, message: str):
        super().__init__(f"round {round_index}: {message}")
        self.round_index = round_index


@dataclass(frozen=True)
class ScheduleSpec:
    """Server learning rate per round.

    ``Constant``: base.  ``InverseT``: base / (t + 1).  ``InverseSqrtT``:
    base / sqrt(t + 1).  ``StepSizeBound``: base * (2 / smoothness) *
    min_k |f_k|^gamma / local_lr over the round's reported losses, i.e. the
    descent-safe step for pseudo-gradients from one local GD step.
    """

    kind: str = "Constant"
    base: float = 1.0
    smoothness: float = 1.0

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}; expected one of {SCHEDULE_KINDS}")
        if not self.base > 0:
            raise ValueError("schedule base must be positive")
        if not self.smoothness > 0:
            raise ValueError("smoothness must be positive")

    def rate(self, t: int, losses: Sequence[float] = (), gamma: float = 0.0, local_lr: float = 1.0) -> float:
        if self.kind == "Constant":
            return self.base
        if self.kind == "InverseT":
            return self.base / (t + 1)
        if self.kind == "InverseSqrtT":
            return self.base / math.sqrt(t + 1)
        return self.base * aggregation.step_size_bound(losses, gamma, self.smoothness) / local_lr


@dataclass(frozen=True)
class FederatedConfig:
    model: ModelSpec = field(default_factory=ModelSpec)
    task: SyntheticTaskSpec = field(default_factory=SyntheticTaskSpec)
    partition: PartitionSpec = field(default_factory=PartitionSpec)
    aggregator: AggregatorSpec = field(default_factory=AggregatorSpec)
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    rounds: int = 10
    local_epochs: int = 1
    local_lr: float = 0.1
    local_optimizer: str = "GD"
    batch_size: int = 32
    participation_fraction: float = 1.0
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.rounds < 0:
            raise ValueError("rounds must be non-negative")
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")
        if not self.local_lr > 0:
            raise ValueError("local_lr must be positive")
        if self.local_optimizer not in LOCAL_OPTIMIZERS:
            raise ValueError(f"local_optimizer must be one of {LOCAL_OPTIMIZERS}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.participation_fraction <= 1:
            raise ValueError("participation_fraction must lie in (0, 1]")
        if self.participation_fraction * self.partition.num_clients < 1 - 1e-12:
            raise ValueError("participation_fraction * num_clients must be >= 1")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be non-negative")
        if self.model.input_dim != self.task.input_dim:
            raise ValueError("model.input_dim must equal task.input_dim")
        if self.model.is_classifier and self.model.output_dim != self.task.num_classes:
            raise ValueError("model.output_dim must equal task.num_classes")

    @property
    def clients_per_round(self) -> int:
        return max(1, math.ceil(self.participation_fraction * self.partition.num_clients - 1e-9))


@dataclass
class RoundRecord:
    round: int
    sampled: list[int]
    per_client_loss: dict[int, float]
    per_client_accuracy: dict[int, float]
    losses_before: dict[int, float]
    losses_after: dict[int, float]
    direction_norm: float
    rho: float
    lambdas: dict[int, float]
    dropped: list[int]
    global_lr: float
    aborted: bool = False
    warnings: list[str] = field(default_factory=list)


def rho(losses_before: Mapping[int, float], losses_after: Mapping[int, float]) -> float:
    """Fraction of clients whose loss did not increase."""
    if set(losses_before) != set(losses_after):
        raise ValueError("loss maps cover different clients")
    if not losses_before:
        raise ValueError("no clients")
    kept = sum(losses_after[k] <= losses_before[k] for k in losses_before)
    return kept / len(losses_before)


def client_rng(seed: int, round_index: int, client_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, round_index, client_id]))


def local_train(
    spec: ModelSpec,
    params: np.ndarray,
    data: Dataset,
    epochs: int,
    lr: float,
    optimizer: str = "GD",
    batch_size: int = 32,
    seed: int | np.random.Generator = 0,
    trace: list[np.ndarray] | None = None,
) -> tuple[np.ndarray, float]:
    """Run local epochs and return (theta_init - theta_final, loss(theta_final)).

    ``trace``, when given, collects every gradient evaluated along the way.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    theta = np.array(params, dtype=np.float64)
    n = len(data)
    for _ in range(epochs):
        if optimizer == "GD":
            batches = [None]
        elif optimizer == "SGD":
            order = rng.permutation(n)
            batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
        else:
            raise ValueError(f"unknown optimizer {optimizer!r}")
        for idx in batches:
            g = gradient(spec, theta, data if idx is None else data.subset(idx))
            if trace is not None:
                trace.append(g)
            theta -= lr * g
    return np.asarray(params, dtype=np.float64) - theta, loss(spec, theta, data)


def build_clients(config: FederatedConfig) -> list[Dataset]:
    return partition(generate_synthetic(config.task), config.partition)


def _evaluate(spec: ModelSpec, params: np.ndarray, clients: Sequence[Dataset]):
    losses = {k: loss(spec, params, ds) for k, ds in enumerate(clients)}
    accs = {k: accuracy(spec, params, ds) for k, ds in enumerate(clients)} if spec.is_classifier else {}
    return losses, accs


def run_round(
    params: np.ndarray,
    round_index: int,
    config: FederatedConfig,
    clients: Sequence[Dataset],
    rng: np.random.Generator,
) -> tuple[np.ndarray, RoundRecord]:
    K = len(clients)
    m = config.clients_per_round
    sampled = sorted(int(k) for k in rng.choice(K, size=m, replace=False))

    before: dict[int, float] = {}
    updates: list[ClientUpdate] = []
    for k in sampled:
        before[k] = loss(config.model, params, clients[k])
        pg, final_loss = local_train(
            config.model, params, clients[k], config.local_epochs, config.local_lr,
            config.local_optimizer, config.batch_size, client_rng(config.seed, round_index, k),
        )
        updates.append(ClientUpdate(k, pg, final_loss, len(clients[k])))

    try:
        result = aggregation.aggregate(updates, config.aggregator)
    except AggregationError as exc:
        level = logging.INFO if isinstance(exc, aggregation.NoCommonDescentError) else logging.WARNING
        logger.log(level, "round %d aborted: %s", round_index, exc)
        losses, accs = _evaluate(config.model, params, clients)
        record = RoundRecord(
            round=round_index, sampled=sampled, per_client_loss=losses, per_client_accuracy=accs,
            losses_before=before, losses_after=dict(before), direction_norm=0.0, rho=1.0,
            lambdas={}, dropped=list(getattr(exc, "dropped", sampled)), global_lr=0.0,
            aborted=True, warnings=[str(exc)],
        )
        return np.array(params, dtype=np.float64), record

    gamma = config.aggregator.gamma if config.aggregator.kind == "AdaFed" else 0.0
    eta = config.schedule.rate(round_index, [u.loss for u in updates], gamma, config.local_lr)
    new_params = params - eta * result.direction
    if not np.all(np.isfinite(new_params)):
        raise FederationError(round_index, "global model became non-finite")

    losses, accs = _evaluate(config.model, new_params, clients)
    if not all(math.isfinite(v) for v in losses.values()):
        raise FederationError(round_index, "client loss became non-finite")
    after = {k: losses[k] for k in sampled}
    record = RoundRecord(
        round=round_index,
        sampled=sampled,
        per_client_loss=losses,
        per_client_accuracy=accs,
        losses_before=before,
        losses_after=after,
        direction_norm=float(np.linalg.norm(result.direction)),
        rho=rho(before, after),
        lambdas={k: float(l) for k, l in zip(result.client_ids, result.lambdas)},
        dropped=list(result.dropped_clients),
        global_lr=eta,
        warnings=list(result.warnings),
    )
    return new_params, record


@dataclass
class ExperimentResult:
    records: list[RoundRecord]
    params: np.ndarray
    initial_loss: dict[int, float]
    initial_accuracy: dict[int, float]


def run(
    config: FederatedConfig,
    clients: Sequence[Dataset] | None = None,
    checkpoint_dir: str | Path | None = None,
    params: np.ndarray | None = None,
) -> ExperimentResult:
    """Full experiment; ``clients`` and ``params`` override the generated ones."""
    if clients is None:
        clients = build_clients(config)
    if len(clients) != config.partition.num_clients:
        raise ValueError("number of client datasets disagrees with partition.num_clients")
    theta = init_params(config.model, config.seed) if params is None else np.array(params, dtype=np.float64)
    init_loss, init_acc = _evaluate(config.model, theta, clients)
    sampler = np.random.default_rng(np.random.SeedSequence([config.seed, 0x5A3F]))
    records = []
    for t in range(config.rounds):
        theta, rec = run_round(theta, t, config, clients, sampler)
        records.append(rec)
        logger.info("round %d lr=%.4g |d|=%.4g rho=%.3f", t, rec.global_lr, rec.direction_norm, rec.rho)
        if checkpoint_dir is not None and config.checkpoint_every and (t + 1) % config.checkpoint_every == 0:
            write_checkpoint(Path(checkpoint_dir) / f"round_{t + 1:06d}.bin", theta)
    return ExperimentResult(records, theta, init_loss, init_acc)


def run_experiment(config: FederatedConfig, clients: Sequence[Dataset] | None = None) -> list[RoundRecord]:
    return run(config, clients).records


def write_checkpoint(path: str | Path, params: np.ndarray) -> None:
    """uint64 little-endian length, then the parameters as little-endian float64."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    values = np.asarray(params, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", values.size))
        fh.write(values.tobytes())


def read_checkpoint(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    (n,) = struct.unpack_from("<Q", raw)
    if len(raw) != 8 + 8 * n:
        raise ValueError(f"checkpoint {path} is truncated or has trailing bytes")
    return np.frombuffer(raw, dtype="<f8", offset=8).astype(np.float64)
