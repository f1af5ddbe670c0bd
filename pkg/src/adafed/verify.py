"""Invariant suites behind ``adafed verify``.

Each suite draws its own random instances from a fixed seed, checks one
mathematical property of the implementation and reports the worst residual
it saw.  The defaults are the sizes used by the acceptance tests.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import aggregation
from .aggregation import AggregatorSpec, ClientUpdate
from .federation import FederatedConfig, ScheduleSpec, local_train, run
from .data import PartitionSpec, SyntheticTaskSpec
from .models import Dataset, ModelSpec, gradient, gradient_check

IDENTITY_TOL = 1e-8
ORTHOGONALITY_TOL = 1e-8
ORACLE_TOL = 1e-6
GRID_STEP = 1e-3
DESCENT_TOL = 1e-12
FD_TOL = 1e-5
GAMMAS = (0.0, 0.1, 1.0, 5.0)


@dataclass
class SuiteResult:
    name: str
    passed: bool
    residuals: dict[str, float] = field(default_factory=dict)
    seconds: float = 0.0
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        res = " ".join(f"{k}={v:.3e}" for k, v in self.residuals.items())
        extra = f" ({self.detail})" if self.detail else ""
        return f"[{status}] {self.name:<10} {res} [{self.seconds:.2f}s]{extra}"


def _timed(fn: Callable[..., SuiteResult]):
    def wrapper(*args, **kwargs) -> SuiteResult:
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - t0
        return res

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def random_instance(rng: np.random.Generator, max_clients: int = 16, max_dim: int = 256):
    """Gaussian client gradients with losses log-uniform in [0.1, 10]."""
    K = int(rng.integers(2, max_clients + 1))
    d = int(rng.integers(K, max_dim + 1))
    grads = rng.standard_normal((K, d))
    losses = np.exp(rng.uniform(math.log(0.1), math.log(10.0), K))
    return [ClientUpdate(k, grads[k], float(losses[k])) for k in range(K)]


def orthogonality_violation(vectors) -> float:
    """Largest |cos| between two distinct vectors of the list."""
    if len(vectors) < 2:
        return 0.0
    T = np.stack(vectors)
    n = np.linalg.norm(T, axis=1)
    C = (T @ T.T) / np.outer(n, n)
    np.fill_diagonal(C, 0.0)
    return float(np.max(np.abs(C)))


@_timed
def identity_suite(instances: int = 1000, seed: int = 0) -> SuiteResult:
    """g_k . d = (alpha/2) |f_k|^gamma, g_k . d > 0, orthogonal basis."""
    rng = np.random.default_rng(seed)
    worst_rel = 0.0
    worst_orth = 0.0
    min_deriv = math.inf
    failures = 0
    for i in range(instances):
        gamma = GAMMAS[i % len(GAMMAS)]
        updates = random_instance(rng)
        try:
            res = aggregation.adafed_direction(updates, AggregatorSpec("AdaFed", gamma))
        except aggregation.AggregationError:
            failures += 1
            continue
        by_id = {u.client_id: u for u in updates}
        kept = [by_id[c] for c in res.client_ids]
        derivs = aggregation.directional_derivatives(res, [u.gradient for u in kept])
        target = np.array([res.alpha / 2 * aggregation.scaled_loss(u.loss, gamma) for u in kept])
        rel = float(np.max(np.abs(derivs - target) / np.abs(target)))
        orth = orthogonality_violation(res.orthogonal_gradients)
        worst_rel = max(worst_rel, rel)
        worst_orth = max(worst_orth, orth)
        min_deriv = min(min_deriv, float(derivs.min()))
        if not (rel <= IDENTITY_TOL and derivs.min() > 0 and orth < ORTHOGONALITY_TOL):
            failures += 1
    return SuiteResult(
        "identity",
        failures == 0,
        {"max_rel_err": worst_rel, "max_orth": worst_orth, "min_deriv": min_deriv},
        detail=f"{failures}/{instances} instances failed" if failures else "",
    )


def random_orthogonal_set(rng: np.random.Generator, K: int, dim: int | None = None) -> list[np.ndarray]:
    dim = dim or K + int(rng.integers(0, 4))
    Q, _ = np.linalg.qr(rng.standard_normal((dim, K)))
    scales = rng.uniform(0.5, 2.0, K)
    return [Q[:, k] * scales[k] for k in range(K)]


def simplex_grid(K: int, step: float = GRID_STEP) -> np.ndarray:
    n = int(round(1 / step))
    if K == 2:
        a = np.arange(n + 1)
        pts = np.stack([a, n - a], axis=1)
    elif K == 3:
        a, b = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
        keep = a + b <= n
        pts = np.stack([a[keep], b[keep], n - a[keep] - b[keep]], axis=1)
    else:
        raise ValueError("grid search only for K = 2 or 3")
    return pts / n


@_timed
def oracle_suite(instances: int = 200, grid_instances: int = 20, seed: int = 1) -> SuiteResult:
    """Closed-form weights against the iterative solver and a simplex grid."""
    rng = np.random.default_rng(seed)
    worst_lam = worst_sq = 0.0
    for _ in range(instances):
        K = int(rng.integers(1, 5))
        vecs = random_orthogonal_set(rng, K)
        lam, alpha = aggregation.solve_lambda(vecs)
        ref = aggregation.min_norm_in_hull(vecs)
        worst_lam = max(worst_lam, float(np.max(np.abs(lam - ref.weights))))
        worst_sq = max(worst_sq, abs(alpha / 2 - float(ref.point @ ref.point)))
    worst_grid = 0.0
    grid_ok = True
    for i in range(grid_instances):
        K = 2 + i % 2
        vecs = random_orthogonal_set(rng, K)
        lam, alpha = aggregation.solve_lambda(vecs)
        sq = np.array([v @ v for v in vecs])
        pts = simplex_grid(K)
        vals = (pts ** 2) @ sq
        best = pts[int(np.argmin(vals))]
        worst_grid = max(worst_grid, float(np.max(np.abs(best - lam))))
        # the closed form may never lose to a grid point
        grid_ok &= alpha / 2 <= float(vals.min()) + 1e-15
    passed = worst_lam <= ORACLE_TOL and worst_sq <= ORACLE_TOL and worst_grid <= GRID_STEP and grid_ok
    return SuiteResult(
        "oracle", passed,
        {"max_lambda_diff": worst_lam, "max_sqnorm_diff": worst_sq, "max_grid_diff": worst_grid},
    )


def quadratic_clients(centers: np.ndarray) -> list[Dataset]:
    return [Dataset(c[None, :], np.zeros(1)) for c in centers]


def descent_config(num_clients: int = 8, dim: int = 10, rounds: int = 500, gamma: float = 1.0, seed: int = 0):
    return FederatedConfig(
        model=ModelSpec("Quadratic", dim, 1),
        task=SyntheticTaskSpec(num_classes=1, input_dim=dim, samples_per_class=1, seed=seed),
        partition=PartitionSpec("Shards", num_clients, shards_per_client=1, seed=seed),
        aggregator=AggregatorSpec("AdaFed", gamma),
        schedule=ScheduleSpec("StepSizeBound", 1.0, smoothness=1.0),
        rounds=rounds,
        local_lr=0.1,
        seed=seed,
    )


@_timed
def descent_suite(seeds: int = 1, rounds: int = 500, num_clients: int = 8, seed: int = 2) -> SuiteResult:
    """No client's loss goes up in any round under the step-size bound.

    A round aborted for lack of a common descent direction leaves the
    parameters untouched, so it counts as a (trivially) non-increasing round.
    """
    worst = -math.inf
    aborted = 0
    for s in range(seeds):
        rng = np.random.default_rng([seed, s])
        cfg = descent_config(num_clients, rounds=rounds, seed=s)
        centers = rng.standard_normal((num_clients, cfg.model.input_dim)) * 3.0
        result = run(cfg, quadratic_clients(centers))
        for rec in result.records:
            aborted += rec.aborted
            for k, before in rec.losses_before.items():
                worst = max(worst, (rec.losses_after[k] - before) / max(1.0, before))
    return SuiteResult("descent", worst <= DESCENT_TOL, {"max_increase": worst},
                       detail=f"{aborted} aborted rounds" if aborted else "")


def random_model_case(rng: np.random.Generator, kind: str):
    D = int(rng.integers(1, 6))
    C = int(rng.integers(2, 5))
    n = int(rng.integers(1, 12))
    spec = ModelSpec(kind, D, C if kind != "Linear" else int(rng.integers(1, 4)),
                     hidden_dim=int(rng.integers(1, 7)), l2_reg=float(rng.choice([0.0, 0.1])))
    X = rng.standard_normal((n, D))
    if spec.is_classifier:
        y = rng.integers(0, spec.output_dim, n)
    elif kind == "Linear":
        y = rng.standard_normal((n, spec.output_dim)) if spec.output_dim > 1 else rng.standard_normal(n)
    else:
        y = np.zeros(n)
    params = rng.standard_normal(spec.num_params)
    return spec, params, Dataset(X, y)


@_timed
def gradient_suite(triples: int = 100, seed: int = 3) -> SuiteResult:
    """Analytic gradients against central differences for every model kind."""
    rng = np.random.default_rng(seed)
    worst = {}
    for kind in ("Linear", "Logistic", "MLP2", "Quadratic"):
        worst[kind] = max(gradient_check(*random_model_case(rng, kind)) for _ in range(triples))
    return SuiteResult("gradients", max(worst.values()) <= FD_TOL,
                       {f"max_err_{k}": v for k, v in worst.items()})


@_timed
def drift_suite(runs: int = 100, seed: int = 4) -> SuiteResult:
    """Multi-epoch pseudo-gradient stays within lr * e * l of the one-step one."""
    rng = np.random.default_rng(seed)
    worst_ratio = 0.0
    for r in range(runs):
        kind = ("Linear", "Logistic", "MLP2", "Quadratic")[r % 4]
        spec, params, data = random_model_case(rng, kind)
        epochs = int(rng.integers(1, 6))
        lr = float(rng.uniform(0.01, 0.5))
        trace: list[np.ndarray] = []
        pg, _ = local_train(spec, params, data, epochs, lr, "GD", trace=trace)
        one_step = lr * gradient(spec, params, data)
        l = max(float(np.linalg.norm(g)) for g in trace)
        bound = lr * epochs * l
        gap = float(np.linalg.norm(pg - one_step))
        worst_ratio = max(worst_ratio, gap / bound if bound > 0 else (0.0 if gap == 0 else math.inf))
    return SuiteResult("drift", worst_ratio <= 1.0, {"max_gap_over_bound": worst_ratio})


SUITES = {
    "identity": identity_suite,
    "oracle": oracle_suite,
    "descent": descent_suite,
    "gradients": gradient_suite,
    "drift": drift_suite,
}


def run_all(names=None) -> list[SuiteResult]:
    return [SUITES[n]() for n in (names or SUITES)]


__all__ = ["SuiteResult", "SUITES", "run_all", "orthogonality_violation", "simplex_grid"]
