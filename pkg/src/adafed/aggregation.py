"""Server-side aggregation rules.

AdaFed builds its update direction in two phases: a loss-scaled Gram-Schmidt
pass over the client gradients, then closed-form weights for the minimum-norm
point in the convex hull of the (now orthogonal) scaled gradients.  FedAvg and
an iterative min-norm solver (the MGDA direction) are provided as baselines.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _dd

logger = logging.getLogger(__name__)

AGGREGATOR_KINDS = ("AdaFed", "FedAvg", "MGDAMinNorm")
FEDAVG_WEIGHTINGS = ("uniform", "by_sample_count")

EPS_LOSS = 1e-12
EPS_DEP = 1e-9
REORTH_RATIO = 0.5


class AggregationError(ValueError):
    """Base class for aggregation failures."""


class EmptyInputError(AggregationError):
    pass


class DimensionMismatchError(AggregationError):
    pass


class AllClientsDroppedError(AggregationError):
    def __init__(self, dropped: Sequence[int]):
        super().__init__(f"every client was dropped as degenerate: {list(dropped)}")
        self.dropped = list(dropped)


class ZeroNormError(AggregationError):
    pass


class NoCommonDescentError(AggregationError):
    """A dropped client's loss would rise along the retained clients' direction.

    Happens near Pareto-stationary points, where the gradients become
    linearly dependent: the dependent client is dropped, and the direction
    built from the others points uphill for it.
    """

    def __init__(self, dropped: Sequence[int], offenders: Sequence[int]):
        super().__init__(f"no common descent direction: dropped clients {list(offenders)} would ascend")
        self.dropped = list(dropped)
        self.offenders = list(offenders)


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    gradient: np.ndarray
    loss: float
    num_samples: int = 1

    def __post_init__(self):
        g = np.asarray(self.gradient, dtype=np.float64)
        if g.ndim != 1:
            raise DimensionMismatchError(f"client {self.client_id}: gradient must be 1-d")
        if not np.all(np.isfinite(g)):
            raise AggregationError(f"client {self.client_id}: non-finite gradient")
        if not math.isfinite(self.loss) or self.loss < 0:
            raise AggregationError(f"client {self.client_id}: loss must be finite and >= 0")
        if self.num_samples < 1:
            raise AggregationError(f"client {self.client_id}: num_samples must be positive")
        object.__setattr__(self, "gradient", g)


@dataclass(frozen=True)
class AggregatorSpec:
    kind: str = "AdaFed"
    gamma: float = 1.0
    fedavg_weights: str = "uniform"

    def __post_init__(self):
        if self.kind not in AGGREGATOR_KINDS:
            raise ValueError(f"unknown aggregator kind {self.kind!r}; expected one of {AGGREGATOR_KINDS}")
        if not math.isfinite(self.gamma) or self.gamma < 0:
            raise ValueError("gamma must be finite and non-negative")
        if self.fedavg_weights not in FEDAVG_WEIGHTINGS:
            raise ValueError(f"unknown fedavg weighting {self.fedavg_weights!r}")


@dataclass
class AggregationResult:
    """Outcome of one server aggregation.

    ``client_ids`` lists the retained clients in processing order and indexes
    ``orthogonal_gradients`` and ``lambdas``.  For the baselines there is no
    orthogonalization, so ``orthogonal_gradients`` is empty and ``alpha`` is
    None.  ``direction_lo`` (AdaFed only) is the low-order word of the
    direction computed in double-double; ``direction`` is the rounded value.
    """

    direction: np.ndarray
    lambdas: np.ndarray
    client_ids: list[int]
    orthogonal_gradients: list[np.ndarray] = field(default_factory=list)
    alpha: float | None = None
    dropped_clients: list[int] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    direction_lo: np.ndarray | None = None

    def to_dict(self) -> dict:
        return {
            "orthogonal_gradients": [g.tolist() for g in self.orthogonal_gradients],
            "lambda": self.lambdas.tolist(),
            "alpha": self.alpha,
            "direction": self.direction.tolist(),
            "dropped_clients": list(self.dropped_clients),
            "client_ids": list(self.client_ids),
            "warnings": list(self.warnings),
        }


def _check_updates(updates: Sequence[ClientUpdate]) -> int:
    if len(updates) == 0:
        raise EmptyInputError("no client updates")
    dim = updates[0].gradient.shape[0]
    for u in updates:
        if u.gradient.shape[0] != dim:
            raise DimensionMismatchError(
                f"client {u.client_id} has dimension {u.gradient.shape[0]}, expected {dim}"
            )
    return dim


def scaled_loss(loss: float, gamma: float, eps_loss: float = EPS_LOSS) -> float:
    """|f|^gamma with |f| floored at ``eps_loss``."""
    return max(abs(loss), eps_loss) ** gamma


@dataclass
class _Basis:
    """Retained orthogonal vectors as double-double rows ``hi + lo``."""

    hi: np.ndarray
    lo: np.ndarray
    sq_hi: np.ndarray
    sq_lo: np.ndarray
    dropped: list[int]

    def __len__(self) -> int:
        return self.hi.shape[0]


def _denominator(scaled, csum_h, csum_l):
    """|f_k|^gamma minus the projection coefficients removed from g_k."""
    return _dd.sub(scaled, 0.0, csum_h, csum_l)


def _orthogonalize_dd(updates, gamma, eps_loss, eps_dep, warnings) -> _Basis:
    dim = _check_updates(updates)
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    Th = np.zeros((0, dim))
    Tl = np.zeros((0, dim))
    sq_h = np.zeros(0)
    sq_l = np.zeros(0)
    dropped: list[int] = []
    for u in updates:
        g = u.gradient
        g_norm = float(np.linalg.norm(g))
        rh, rl = g.copy(), np.zeros(dim)
        coef_h, coef_l = np.zeros(len(sq_h)), np.zeros(len(sq_h))
        # classical Gram-Schmidt in double-double, with a second pass when the
        # first one cancelled most of the vector ("twice is enough")
        prev_norm = g_norm
        for _ in range(2 if len(sq_h) else 0):
            dh, dl = _dd.dot_rows(Th, Tl, rh, rl)
            ch, cl = _dd.div(dh, dl, sq_h, sq_l)
            ph, pl = _dd.combine(ch, cl, Th, Tl)
            rh, rl = _dd.sub(rh, rl, ph, pl)
            coef_h, coef_l = _dd.add(coef_h, coef_l, ch, cl)
            norm = float(np.linalg.norm(rh))
            if norm > REORTH_RATIO * prev_norm:
                break
            prev_norm = norm
        csum_h, csum_l = _dd.sum_last(coef_h, coef_l)
        den_h, den_l = _denominator(scaled_loss(u.loss, gamma, eps_loss), float(csum_h), float(csum_l))
        numerator_norm = float(np.linalg.norm(rh))
        if numerator_norm == 0.0 or numerator_norm < eps_dep * g_norm or abs(den_h) < eps_dep:
            logger.debug(
                "dropping client %d: residual %.3e, denominator %.3e",
                u.client_id, numerator_norm, den_h,
            )
            dropped.append(u.client_id)
            continue
        if den_h < 0 and warnings is not None:
            warnings.append(f"client {u.client_id}: negative denominator {den_h:.6g}")
        th, tl = _dd.div(rh, rl, den_h, den_l)
        nh, nl = _dd.dot_rows(th[None, :], tl[None, :], th, tl)
        Th = np.vstack([Th, th])
        Tl = np.vstack([Tl, tl])
        sq_h = np.append(sq_h, nh)
        sq_l = np.append(sq_l, nl)
    return _Basis(Th, Tl, sq_h, sq_l, dropped)


def orthogonalize(
    updates: Sequence[ClientUpdate],
    gamma: float,
    eps_loss: float = EPS_LOSS,
    eps_dep: float = EPS_DEP,
    warnings: list[str] | None = None,
) -> tuple[list[np.ndarray], list[int]]:
    """Loss-scaled Gram-Schmidt over the updates, in the order given.

    Client k is reduced against the already-retained vectors and divided by
    ``|f_k|^gamma - sum_i (g_k . t_i) / (t_i . t_i)``.  The projection step
    is repeated on the residual when the first one removed more than half of
    the vector's norm, and the coefficients actually removed over both passes
    are the ones summed in the denominator.

    The arithmetic is done in double-double.  For large gamma the scaled
    losses span many orders of magnitude and the final direction is nearly
    orthogonal to some client gradients, so plain float64 loses the
    ``g_k . d = (alpha / 2) |f_k|^gamma`` relation in the cancellation.

    Returns the retained orthogonal vectors (rounded to float64) and the ids
    of dropped clients.
    """
    basis = _orthogonalize_dd(updates, gamma, eps_loss, eps_dep, warnings)
    return list(basis.hi), basis.dropped


def _solve_lambda_dd(sq_h, sq_l):
    if len(sq_h) == 0:
        raise EmptyInputError("no vectors")
    if np.any(sq_h == 0.0):
        raise ZeroNormError("zero-norm vector passed to solve_lambda")
    inv_h, inv_l = _dd.div(np.ones_like(sq_h), np.zeros_like(sq_h), sq_h, sq_l)
    tot_h, tot_l = _dd.sum_last(inv_h, inv_l)
    lam_h, lam_l = _dd.div(inv_h, inv_l, tot_h, tot_l)
    alpha_h, _ = _dd.div(2.0, 0.0, float(tot_h), float(tot_l))
    return lam_h, lam_l, float(alpha_h)


def solve_lambda(orthogonal_gradients: Sequence[np.ndarray]) -> tuple[np.ndarray, float]:
    """Closed-form min-norm weights for mutually orthogonal vectors.

    lambda_k = 1 / (|t_k|^2 * sum_j 1/|t_j|^2) and alpha = 2 / sum_j 1/|t_j|^2.
    """
    if len(orthogonal_gradients) == 0:
        raise EmptyInputError("no vectors")
    T = np.stack([np.asarray(t, dtype=np.float64) for t in orthogonal_gradients])
    sq_h, sq_l = _dd.sum_last(*_dd.two_prod(T, T))
    lam, _, alpha = _solve_lambda_dd(sq_h, sq_l)
    return lam, alpha


def adafed_direction(updates: Sequence[ClientUpdate], spec: AggregatorSpec) -> AggregationResult:
    """AdaFed common direction; updates are processed in ascending client id.

    Dropped clients are not covered by the directional-derivative identity.
    If the resulting direction is not a descent direction for one of them,
    ``NoCommonDescentError`` is raised instead of returning it.
    """
    if spec.kind != "AdaFed":
        raise ValueError(f"adafed_direction called with aggregator kind {spec.kind!r}")
    ordered = sorted(updates, key=lambda u: u.client_id)
    notes: list[str] = []
    basis = _orthogonalize_dd(ordered, spec.gamma, EPS_LOSS, EPS_DEP, notes)
    if not len(basis):
        raise AllClientsDroppedError(basis.dropped)
    lam_h, lam_l, alpha = _solve_lambda_dd(basis.sq_hi, basis.sq_lo)
    d_hi, d_lo = _dd.combine(lam_h, lam_l, basis.hi, basis.lo)
    gone = set(basis.dropped)
    if gone:
        dropped_updates = [u for u in ordered if u.client_id in gone]
        G = np.stack([u.gradient for u in dropped_updates])
        dh, dl = _dd.dot_rows(G, np.zeros_like(G), d_hi, d_lo)
        uphill = [u.client_id for u, v in zip(dropped_updates, dh + dl) if v <= 0]
        if uphill:
            raise NoCommonDescentError(basis.dropped, uphill)
    retained = [u.client_id for u in ordered if u.client_id not in gone]
    logger.debug("adafed order=%s dropped=%s", [u.client_id for u in ordered], basis.dropped)
    return AggregationResult(
        direction=d_hi,
        lambdas=lam_h,
        client_ids=retained,
        orthogonal_gradients=list(basis.hi),
        alpha=alpha,
        dropped_clients=basis.dropped,
        warnings=notes,
        direction_lo=d_lo,
    )


def directional_derivatives(result: AggregationResult, gradients: Sequence[np.ndarray]) -> np.ndarray:
    """``g . d`` for each gradient, evaluated with the direction's low-order word.

    The float64 ``direction`` alone cannot resolve inner products that are
    ten orders of magnitude below ``|g| |d|``; this is the accurate version.
    """
    G = np.stack([np.asarray(g, dtype=np.float64) for g in gradients])
    lo = result.direction_lo if result.direction_lo is not None else np.zeros_like(result.direction)
    hi, low = _dd.dot_rows(G, np.zeros_like(G), result.direction, lo)
    return hi + low


def fedavg_weights(updates: Sequence[ClientUpdate], weights: str = "uniform") -> np.ndarray:
    if len(updates) == 0:
        raise EmptyInputError("no client updates")
    if weights == "uniform":
        w = np.ones(len(updates))
    elif weights == "by_sample_count":
        w = np.array([u.num_samples for u in updates], dtype=np.float64)
    else:
        raise ValueError(f"unknown fedavg weighting {weights!r}")
    return w / w.sum()


def fedavg_direction(updates: Sequence[ClientUpdate], weights: str = "uniform") -> np.ndarray:
    _check_updates(updates)
    lam = fedavg_weights(updates, weights)
    return sum(l * u.gradient for l, u in zip(lam, updates))


@dataclass
class MinNormResult:
    weights: np.ndarray
    point: np.ndarray
    gap: float
    iterations: int
    converged: bool


def min_norm_in_hull(
    gradients: Sequence[np.ndarray],
    max_iters: int = 100_000,
    tol: float = 1e-12,
) -> MinNormResult:
    """Minimum-norm point of conv{g_1..g_K} by pairwise Frank-Wolfe.

    Starts from uniform weights.  Each step moves mass from the support vertex
    with the largest gradient entry to the vertex with the smallest, using the
    exact line search for the quadratic.  Stops once the spread of ``M @ lam``
    between those two vertices is below ``tol`` times the largest squared
    norm.  Running out of iterations is logged and flagged, not raised.
    """
    if len(gradients) == 0:
        raise EmptyInputError("no vectors")
    G = np.stack([np.asarray(g, dtype=np.float64) for g in gradients])
    K = G.shape[0]
    M = G @ G.T
    scale = max(float(np.max(np.diag(M))), np.finfo(float).tiny)
    lam = np.full(K, 1.0 / K)
    Ml = M @ lam
    gap = math.inf
    it = 0
    for it in range(1, max_iters + 1):
        s = int(np.argmin(Ml))
        support = np.flatnonzero(lam > 0)
        v = int(support[np.argmax(Ml[support])])
        gap = float(Ml[v] - Ml[s])
        if gap <= tol * scale:
            break
        curvature = M[s, s] + M[v, v] - 2.0 * M[s, v]
        step = lam[v] if curvature <= 0 else min(gap / curvature, lam[v])
        lam[s] += step
        lam[v] -= step
        if lam[v] < 1e-300:
            lam[v] = 0.0
        Ml += step * (M[:, s] - M[:, v])
    else:
        it = max_iters
    converged = gap <= tol * scale
    if not converged:
        logger.warning("min_norm_in_hull stopped after %d iterations with gap %.3e", it, gap)
    lam = np.clip(lam, 0.0, None)
    lam /= lam.sum()
    return MinNormResult(weights=lam, point=lam @ G, gap=gap, iterations=it, converged=converged)


def step_size_bound(losses: Sequence[float], gamma: float, L: float, eps_loss: float = EPS_LOSS) -> float:
    """Largest server step (2/L) * min_k |f_k|^gamma that keeps every loss non-increasing."""
    if L <= 0:
        raise ValueError("L must be positive")
    if len(losses) == 0:
        raise EmptyInputError("no losses")
    return 2.0 / L * min(scaled_loss(f, gamma, eps_loss) for f in losses)


def aggregate(updates: Sequence[ClientUpdate], spec: AggregatorSpec) -> AggregationResult:
    """Dispatch on ``spec.kind``; baselines also process clients in ascending id."""
    if spec.kind == "AdaFed":
        return adafed_direction(updates, spec)
    ordered = sorted(updates, key=lambda u: u.client_id)
    _check_updates(ordered)
    ids = [u.client_id for u in ordered]
    if spec.kind == "FedAvg":
        lam = fedavg_weights(ordered, spec.fedavg_weights)
        return AggregationResult(direction=fedavg_direction(ordered, spec.fedavg_weights), lambdas=lam, client_ids=ids)
    res = min_norm_in_hull([u.gradient for u in ordered])
    notes = [] if res.converged else [f"min-norm solver not converged, gap {res.gap:.3e}"]
    return AggregationResult(direction=res.point, lambdas=res.weights, client_ids=ids, warnings=notes)
