"""Order/vehicle grid distributions, their KL divergence, and its analytic
gradient with respect to the per-grid dispatch probabilities.

The dispatch flow is described by idle counts ``c[j]`` at the current step and
a matrix ``pi[j, i]`` of probabilities of sending a vehicle from grid j to
grid i. The induced next-step vehicle counts are ``n[i] = sum_j c[j] pi[j, i]``
with total ``N = sum_i n[i]`` and rate vector ``q = n / N``. Matching q to the
order rate vector p means minimizing ``KL(p || q)``; the exact partial
derivative with respect to a single entry pi[j, i] (others held fixed) is

    d KL / d pi[j, i] = c[j] * (1 / N - p[i] / n[i])

which vanishes exactly when q == p.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .domain import DomainError


@dataclass(frozen=True)
class GridDistribution:
    """Probability vector over grids; entries nonnegative, summing to one."""

    probabilities: np.ndarray
    epsilon: float = 0.0

    def __post_init__(self) -> None:
        p = np.asarray(self.probabilities, dtype=float)
        object.__setattr__(self, "probabilities", p)
        if p.ndim != 1 or p.size == 0:
            raise DomainError("distribution must be a nonempty 1-d vector")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise DomainError("distribution entries must be finite and nonnegative")
        if abs(p.sum() - 1.0) > 1e-9:
            raise DomainError(f"distribution sums to {p.sum()!r}, expected 1 within 1e-9")

    def __len__(self) -> int:
        return self.probabilities.size


def smooth(counts: np.ndarray, epsilon: float) -> GridDistribution:
    """Additive smoothing: (counts + eps) / (sum + N * eps).

    All-zero counts become the uniform distribution; eps -> 0 recovers the
    empirical frequencies.
    """
    if epsilon <= 0:
        raise DomainError(f"smoothing epsilon must be positive, got {epsilon}")
    c = np.asarray(counts, dtype=float)
    if np.any(c < 0):
        raise DomainError("counts must be nonnegative")
    total = c.sum() + c.size * epsilon
    return GridDistribution((c + epsilon) / total, epsilon=epsilon)


@dataclass(frozen=True)
class DispatchFlow:
    """Idle vehicle counts per grid and the dispatch probability matrix.

    Rows of ``dispatch_probs`` are expected to be stochastic when the flow
    comes from realized dispatch frequencies; this is not enforced here so
    finite-difference probes can perturb single entries.
    """

    idle_counts: np.ndarray
    dispatch_probs: np.ndarray

    def __post_init__(self) -> None:
        c = np.asarray(self.idle_counts, dtype=float)
        pi = np.asarray(self.dispatch_probs, dtype=float)
        object.__setattr__(self, "idle_counts", c)
        object.__setattr__(self, "dispatch_probs", pi)
        n = c.size
        if pi.shape != (n, n):
            raise DomainError(f"dispatch matrix shape {pi.shape} does not match {n} grids")
        if np.any(c < 0) or np.any(pi < 0):
            raise DomainError("idle counts and dispatch probabilities must be nonnegative")


@dataclass(frozen=True)
class FlowDerived:
    """Next-step vehicle counts and rates induced by a dispatch flow."""

    arrivals: np.ndarray  # n[i], vehicles arriving in grid i
    total: float  # sum of arrivals
    vehicle_rates: np.ndarray  # q[i] = n[i] / total
    order_rates: Optional[np.ndarray] = None  # p[i], attached by callers that know it


def vehicle_distribution(flow: DispatchFlow) -> FlowDerived:
    """Push idle counts through the dispatch matrix: n = c @ pi.

    For row-stochastic ``pi`` the total equals sum(c) (vehicles are conserved,
    up to float rounding).
    """
    c = flow.idle_counts
    if c.sum() <= 0:
        raise DomainError("empty fleet: no idle vehicles to dispatch")
    n = c @ flow.dispatch_probs
    total = float(n.sum())
    if total <= 0:
        raise DomainError("dispatch flow sends all vehicles nowhere (zero total)")
    return FlowDerived(arrivals=n, total=total, vehicle_rates=n / total)


def kl_divergence(p: GridDistribution, q: GridDistribution) -> float:
    """KL(p || q) = sum_i p_i ln(p_i / q_i); nonnegative, zero iff p == q.

    Entries with p_i == 0 contribute nothing. A zero in q where p is positive
    is a domain error: callers must smooth first.
    """
    pv, qv = p.probabilities, q.probabilities
    if pv.shape != qv.shape:
        raise DomainError("distributions must have the same length")
    support = pv > 0
    if np.any(qv[support] <= 0):
        raise DomainError("q has a zero entry on the support of p; smooth before comparing")
    return float(np.sum(pv[support] * np.log(pv[support] / qv[support])))


def kl_policy_gradient(flow: DispatchFlow, p: GridDistribution, *, epsilon: float = 0.0) -> np.ndarray:
    """Exact gradient of KL(p || q(pi)) with respect to each dispatch entry.

    Returns g with g[j, i] = c[j] * (1/N - p[i]/n[i]) where n and N are the
    arrival counts and their total, optionally smoothed by adding ``epsilon``
    to every arrival count (grids that receive no vehicles but have orders
    would otherwise make the divergence infinite).
    """
    derived = vehicle_distribution(flow)
    pv = p.probabilities
    if pv.size != flow.idle_counts.size:
        raise DomainError("order distribution length does not match grid count")
    n = derived.arrivals + epsilon
    if np.any((n <= 0) & (pv > 0)):
        raise DomainError("a grid with orders receives no vehicles; pass epsilon > 0")
    total = derived.total + epsilon * n.size
    with np.errstate(divide="ignore", invalid="ignore"):
        per_dest = 1.0 / total - np.where(n > 0, pv / np.where(n > 0, n, 1.0), 0.0)
    return flow.idle_counts[:, None] * per_dest[None, :]


def experience_kl_coefficient(
    flow: DispatchFlow, p: GridDistribution, source_grid: int, dest_grid: int, *, epsilon: float = 0.0
) -> float:
    """The single gradient entry stored with a replay experience for its transition."""
    g = kl_policy_gradient(flow, p, epsilon=epsilon)
    return float(g[source_grid, dest_grid])
