"""Fairness statistics over per-client accuracies."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class FairnessReport:
    mean_accuracy: float
    std_accuracy: float
    worst_k_pct: float
    best_k_pct: float
    angle_degrees: float
    kl_to_uniform: float

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def csv_header(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def csv_row(self) -> list[str]:
        return [format(getattr(self, f.name), ".17g") for f in fields(self)]


def tail_count(num_clients: int, k_pct: float) -> int:
    # float fuzz guard: 10% of 20 must be 2, not 3
    return max(1, math.ceil(k_pct * num_clients / 100.0 - 1e-9))


def angle_to_ones(acc: np.ndarray) -> float:
    # atan2 of the parts across and along the ones direction; arccos of the
    # cosine loses about half the digits for nearly uniform vectors
    if not np.any(acc):
        raise ValueError("angle is undefined for an all-zero accuracy vector")
    along = float(acc.sum()) / math.sqrt(acc.size)
    across = float(np.linalg.norm(acc - acc.mean()))
    return math.degrees(math.atan2(across, along))


def kl_to_uniform(acc: np.ndarray) -> float:
    total = float(acc.sum())
    if total <= 0.0:
        raise ValueError("KL is undefined for an all-zero accuracy vector")
    p = acc / total
    nz = p > 0
    return max(0.0, float(np.sum(p[nz] * np.log(p[nz] * acc.size))))


def fairness_report(accuracies: Sequence[float], k_pct: float = 10.0) -> FairnessReport:
    """Mean, population std, worst/best k% means, angle to 1 and KL(a_hat || uniform)."""
    acc = np.asarray(accuracies, dtype=np.float64)
    if acc.ndim != 1 or acc.size == 0:
        raise ValueError("need a non-empty 1-d list of accuracies")
    if not 0 < k_pct <= 50:
        raise ValueError("k_pct must lie in (0, 50]")
    if np.any(acc < 0):
        raise ValueError("accuracies must be non-negative")
    K = acc.size
    mean = float(acc.mean())
    std = math.sqrt(float(np.mean((acc - mean) ** 2)))
    m = tail_count(K, k_pct)
    ranked = np.sort(acc)
    return FairnessReport(
        mean_accuracy=mean,
        std_accuracy=std,
        worst_k_pct=float(ranked[:m].mean()),
        best_k_pct=float(ranked[-m:].mean()),
        angle_degrees=angle_to_ones(acc),
        kl_to_uniform=kl_to_uniform(acc),
    )
