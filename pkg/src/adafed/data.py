"""Synthetic classification data and client partitioning."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .models import Dataset

PARTITION_KINDS = ("Shards", "Dirichlet", "ByCluster")
MAX_DIRICHLET_ATTEMPTS = 100


class PartitionError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticTaskSpec:
    num_classes: int = 4
    input_dim: int = 5
    samples_per_class: int = 100
    cluster_spread: float = 1.0
    label_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 1 or self.input_dim < 1 or self.samples_per_class < 1:
            raise ValueError("num_classes, input_dim and samples_per_class must be positive")
        if not self.cluster_spread > 0:
            raise ValueError("cluster_spread must be positive")
        if not 0 <= self.label_noise < 1:
            raise ValueError("label_noise must lie in [0, 1)")


@dataclass(frozen=True)
class PartitionSpec:
    kind: str = "Dirichlet"
    num_clients: int = 10
    shards_per_client: int = 2
    beta: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in PARTITION_KINDS:
            raise ValueError(f"unknown partition kind {self.kind!r}; expected one of {PARTITION_KINDS}")
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if self.shards_per_client < 1:
            raise ValueError("shards_per_client must be >= 1")
        if not self.beta > 0:
            raise ValueError("beta must be positive")


def generate_synthetic(spec: SyntheticTaskSpec) -> Dataset:
    """Gaussian blobs, one per class, with optional uniform label flips.

    Class means are 3 * N(0, I); samples are N(mean, spread^2 I).  A flipped
    label is replaced by a different class chosen uniformly.  Sample order is
    shuffled.
    """
    rng = np.random.default_rng(spec.seed)
    C, d, m = spec.num_classes, spec.input_dim, spec.samples_per_class
    means = 3.0 * rng.standard_normal((C, d))
    labels = np.repeat(np.arange(C), m)
    X = means[labels] + spec.cluster_spread * rng.standard_normal((C * m, d))
    if spec.label_noise > 0 and C > 1:
        flip = rng.random(C * m) < spec.label_noise
        shift = rng.integers(1, C, size=C * m)
        labels = np.where(flip, (labels + shift) % C, labels)
    order = rng.permutation(C * m)
    return Dataset(X[order], labels[order])


def _shards(labels: np.ndarray, spec: PartitionSpec, rng) -> list[np.ndarray]:
    n = labels.shape[0]
    total = spec.num_clients * spec.shards_per_client
    if n % total:
        raise PartitionError(f"{n} samples cannot be cut into {total} equal shards")
    size = n // total
    by_label = np.argsort(labels, kind="stable")
    shards = by_label.reshape(total, size)
    dealt = rng.permutation(total).reshape(spec.num_clients, spec.shards_per_client)
    return [np.sort(shards[row].ravel()) for row in dealt]


def _dirichlet(labels: np.ndarray, spec: PartitionSpec, rng) -> list[np.ndarray]:
    K = spec.num_clients
    classes = np.unique(labels)
    for _ in range(MAX_DIRICHLET_ATTEMPTS):
        owner = np.empty(labels.shape[0], dtype=np.intp)
        for c in classes:
            idx = np.flatnonzero(labels == c)
            p = rng.dirichlet(np.full(K, spec.beta))
            owner[idx] = rng.choice(K, size=idx.size, p=p)
        counts = np.bincount(owner, minlength=K)
        if np.all(counts > 0):
            return [np.flatnonzero(owner == k) for k in range(K)]
    raise PartitionError(
        f"Dirichlet allocation left a client empty after {MAX_DIRICHLET_ATTEMPTS} attempts"
    )


def _by_cluster(labels: np.ndarray, spec: PartitionSpec, rng) -> list[np.ndarray]:
    # class c goes to clients {k : k % C == c}; K < C gives clients several classes
    K = spec.num_clients
    classes = np.unique(labels)
    C = classes.size
    owner = np.empty(labels.shape[0], dtype=np.intp)
    for j, c in enumerate(classes):
        idx = rng.permutation(np.flatnonzero(labels == c))
        holders = np.arange(j % K, K, C) if K >= C else np.array([j % K])
        for part, k in zip(np.array_split(idx, holders.size), holders):
            owner[part] = k
    counts = np.bincount(owner, minlength=K)
    if np.any(counts == 0):
        raise PartitionError("ByCluster left a client empty; use num_clients <= samples per class")
    return [np.flatnonzero(owner == k) for k in range(K)]


def partition_indices(labels: np.ndarray, spec: PartitionSpec) -> list[np.ndarray]:
    """Sample indices per client; every index appears exactly once."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "Shards":
        return _shards(labels, spec, rng)
    if spec.kind == "Dirichlet":
        return _dirichlet(labels, spec, rng)
    return _by_cluster(labels, spec, rng)


def partition(data: Dataset, spec: PartitionSpec) -> list[Dataset]:
    return [data.subset(idx) for idx in partition_indices(data.labels, spec)]


def label_entropy(data: Dataset, num_classes: int) -> float:
    """Shannon entropy (nats) of a client's label distribution."""
    p = np.bincount(data.labels.astype(np.intp), minlength=num_classes) / len(data)
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def write_partition_csv(path: str | Path, clients: Sequence[Dataset]) -> None:
    """One row per sample: client_id, label, x0..x{d-1}."""
    d = clients[0].features.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["client_id", "label"] + [f"x{i}" for i in range(d)])
        for k, ds in enumerate(clients):
            for x, y in zip(ds.features, ds.labels):
                w.writerow([k, format(y, ".17g") if np.issubdtype(ds.labels.dtype, np.floating) else int(y)]
                           + [format(v, ".17g") for v in x])


def read_partition_csv(path: str | Path) -> list[Dataset]:
    rows: dict[int, tuple[list, list]] = {}
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        next(r)
        for row in r:
            k = int(row[0])
            feats, labs = rows.setdefault(k, ([], []))
            lab = float(row[1])
            labs.append(int(lab) if lab.is_integer() else lab)
            feats.append([float(v) for v in row[2:]])
    return [Dataset(np.array(rows[k][0]), np.array(rows[k][1])) for k in sorted(rows)]
