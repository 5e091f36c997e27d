"""Per-grid action selection and the deployment-style matching primitives.

Within a grid all idle vehicles share the same state, so the value network is
evaluated once per candidate order and vehicles are assigned sequentially
without replacement: each draws from the policy over the remaining real
orders plus the always-available virtual (stay) order. Ties break toward the
lower index everywhere so runs are reproducible.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np
from scipy.optimize import linear_sum_assignment

from .domain import ConfigError, ContractViolation, DomainError, GridId, Observation, Order

GREEDY = "greedy"


@dataclass(frozen=True)
class BoltzmannPolicy:
    """Softmax exploration over Q values with temperature tau."""

    temperature: float = 1.0

    def __post_init__(self) -> None:
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")


PolicyMode = Union[BoltzmannPolicy, str]


def boltzmann_probs(q_values: np.ndarray, temperature: float) -> np.ndarray:
    """Stable softmax of q / tau; shift-invariant, sums to one."""
    q = np.asarray(q_values, dtype=float)
    if q.size == 0:
        raise DomainError("cannot form a policy over an empty action set")
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    z = (q - q.max()) / temperature
    w = np.exp(z)
    return w / w.sum()


@dataclass(frozen=True)
class GridDecision:
    """Assignments made inside one grid at one timestep."""

    grid: GridId
    assignments: tuple[tuple[int, Order], ...]
    leftover_idle: tuple[int, ...] = ()


def _check_candidates(orders: Sequence[Order]) -> int:
    """Candidates must be real orders followed by exactly one virtual order."""
    if not orders or not orders[-1].virtual:
        raise ContractViolation("candidate list must end with the virtual (stay) order")
    if any(o.virtual for o in orders[:-1]):
        raise ContractViolation("only the last candidate may be virtual")
    return len(orders) - 1


def assign_with_policy(
    q_values: np.ndarray,
    orders: Sequence[Order],
    vehicle_ids: Sequence[int],
    policy: PolicyMode,
    rng: np.random.Generator | None = None,
) -> GridDecision:
    """Sequential without-replacement assignment given precomputed Q values.

    ``orders`` lists the real candidates followed by the virtual order;
    ``q_values`` is aligned with it. Chosen real orders leave the pool, the
    virtual order never does. Greedy mode takes the best remaining candidate
    (descending Q, lower index on ties), which reproduces top-m selection.
    """
    n_real = _check_candidates(orders)
    if len(q_values) != len(orders):
        raise ContractViolation(f"{len(q_values)} q_values do not match {len(orders)} candidates")
    grid = orders[-1].source
    boltzmann = isinstance(policy, BoltzmannPolicy)
    if boltzmann and rng is None:
        raise ContractViolation("boltzmann assignment needs an rng")
    if not boltzmann and policy != GREEDY:
        raise ConfigError(f"unknown policy mode {policy!r}")

    # candidate pools are tiny; plain-float math beats array dispatch here
    q = [float(x) for x in q_values]
    remaining = list(range(n_real))
    assignments = []
    for vid in vehicle_ids:
        cand = remaining + [n_real]  # virtual last, so real orders win ties
        if boltzmann:
            tau = policy.temperature
            mx = max(q[k] for k in cand)
            weights = [math.exp((q[k] - mx) / tau) for k in cand]
            r = rng.random() * math.fsum(weights)
            acc = 0.0
            pick = len(cand) - 1
            for i, wgt in enumerate(weights):
                acc += wgt
                if r < acc:
                    pick = i
                    break
        else:
            pick = 0
            best = q[cand[0]]
            for i in range(1, len(cand)):
                if q[cand[i]] > best:
                    pick, best = i, q[cand[i]]
        chosen = cand[pick]
        assignments.append((vid, orders[chosen]))
        if chosen != n_real:
            remaining.remove(chosen)
    return GridDecision(grid=grid, assignments=tuple(assignments))


def select_orders_for_grid(
    obs: Observation,
    orders: Sequence[Order],
    vehicle_ids: Sequence[int],
    scorer: Callable[[Observation, Sequence[Order]], np.ndarray],
    policy: PolicyMode,
    rng: np.random.Generator | None = None,
) -> GridDecision:
    """Score each candidate once with the shared grid state, then assign."""
    _check_candidates(orders)
    q = np.asarray(scorer(obs, orders), dtype=float)
    return assign_with_policy(q, orders, vehicle_ids, policy, rng)


def nod_policy(
    obs: Observation,
    orders: Sequence[Order],
    vehicle_ids: Sequence[int],
    rng: np.random.Generator,
) -> GridDecision:
    """Nearest-order dispatch baseline: uniform random matching within a grid.

    Vehicles take distinct real orders uniformly at random and fall back to
    the virtual order only once the real ones are exhausted.
    """
    n_real = _check_candidates(orders)
    grid = orders[-1].source
    remaining = list(range(n_real))
    assignments = []
    for vid in vehicle_ids:
        if remaining:
            pick = int(rng.integers(len(remaining)))
            assignments.append((vid, orders[remaining.pop(pick)]))
        else:
            assignments.append((vid, orders[n_real]))
    return GridDecision(grid=grid, assignments=tuple(assignments))


@dataclass(frozen=True)
class AssignmentMatrix:
    """Boolean driver-by-order matrix with at most one mark per row and column."""

    matrix: np.ndarray

    def __post_init__(self) -> None:
        a = np.asarray(self.matrix, dtype=bool)
        object.__setattr__(self, "matrix", a)
        if a.ndim != 2:
            raise DomainError("assignment matrix must be 2-d")
        if np.any(a.sum(axis=1) > 1) or np.any(a.sum(axis=0) > 1):
            raise DomainError("each driver and each order may be matched at most once")

    def pairs(self) -> list[tuple[int, int]]:
        rows, cols = np.nonzero(self.matrix)
        return list(zip(rows.tolist(), cols.tolist()))

    def objective(self, q: np.ndarray) -> float:
        return float(np.asarray(q, dtype=float)[self.matrix].sum())


def hungarian_match(q: np.ndarray) -> AssignmentMatrix:
    """Optimal partial assignment maximizing sum Q[i, j] over matched pairs.

    Each driver may also do nothing (modeled as a zero-value slot), so pairs
    with negative value are never forced into the solution. Rectangular
    matrices are handled by the underlying solver.
    """
    q = np.asarray(q, dtype=float)
    if q.ndim != 2 or q.size == 0:
        raise DomainError("expected a nonempty 2-d value matrix")
    if not np.all(np.isfinite(q)):
        raise DomainError("value matrix must be finite")
    m, n = q.shape
    padded = np.concatenate([q, np.zeros((m, m))], axis=1)
    rows, cols = linear_sum_assignment(padded, maximize=True)
    matrix = np.zeros((m, n), dtype=bool)
    for i, j in zip(rows, cols):
        if j < n:
            matrix[i, j] = True
    return AssignmentMatrix(matrix)


def top_m_match(q_values: np.ndarray, m: int) -> list[int]:
    """Indices of the m largest values, ascending; lower index wins ties.

    This is what optimal matching degenerates to when all drivers in a grid
    are interchangeable.
    """
    if m < 0:
        raise DomainError(f"m must be nonnegative, got {m}")
    q = np.asarray(q_values, dtype=float)
    if m == 0 or q.size == 0:
        return []
    order = np.argsort(-q, kind="stable")
    return sorted(int(i) for i in order[: min(m, q.size)])
