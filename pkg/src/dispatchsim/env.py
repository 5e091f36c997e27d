"""Grid-world order-dispatching environment.

Each timestep a fixed number of orders is born from a drifting 2-d Gaussian:
the source cell is the rounded, clipped sample, the destination is a uniform
draw among the source's neighbours, and the price is proportional to the
Euclidean distance between the two cell centers. Vehicles serve at most one
order per step, migrate to the order's destination, and orders that nobody
takes expire at the end of their birth step.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .domain import (
    ConfigError,
    ContractViolation,
    FeatureCodec,
    GridId,
    GridTopology,
    Observation,
    Order,
    Vehicle,
    VehicleStatus,
)

DRIFT_PATHS = ("linear_reflect", "circular")
DEST_ENCODINGS = ("coords_mean", "one_hot_mean")


@dataclass(frozen=True)
class EnvConfig:
    topology: GridTopology
    horizon: int = 144
    vehicle_count: int = 50
    orders_per_step: int = 100
    sigma: float = 1.5
    drift_step: float = 1.0
    drift_path: str = "linear_reflect"
    drift_angle_deg: float = 30.0
    order_duration: int = 1
    price_coefficient: float = 0.1
    dest_encoding: str = "coords_mean"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if self.vehicle_count < 1 or self.orders_per_step < 1:
            raise ConfigError("need at least one vehicle and one order per step")
        if self.vehicle_count >= self.orders_per_step * self.horizon:
            raise ConfigError("fleet must be smaller than the expected number of orders per episode")
        if self.sigma < 0 or self.drift_step < 0 or self.price_coefficient < 0:
            raise ConfigError("sigma, drift_step and price_coefficient must be nonnegative")
        if self.order_duration < 1:
            raise ConfigError("order_duration must be >= 1")
        if self.drift_path not in DRIFT_PATHS:
            raise ConfigError(f"drift_path must be one of {DRIFT_PATHS}")
        if self.dest_encoding not in DEST_ENCODINGS:
            raise ConfigError(f"dest_encoding must be one of {DEST_ENCODINGS}")
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")
        w, h = self.topology.width, self.topology.height
        if self.drift_path == "linear_reflect" and self.drift_step > 0:
            hx, hy = _heading(self.drift_angle_deg)
            if 2 * self.drift_step * abs(hx) > w or 2 * self.drift_step * abs(hy) > h:
                raise ConfigError(
                    "drift_step too large for reflecting path on this grid; use drift_path='circular'"
                )
        if self.drift_path == "circular" and self.drift_step > 2 * _circle_radius(self.topology):
            raise ConfigError("drift_step exceeds the diameter of the drift circle")

    @property
    def max_price(self) -> float:
        return self.price_coefficient * self.topology.max_neighbor_distance

    @property
    def dest_dim(self) -> int:
        return 2 if self.dest_encoding == "coords_mean" else self.topology.n_grids

    def codec(self) -> FeatureCodec:
        return FeatureCodec(
            topo=self.topology,
            max_price=self.max_price,
            max_duration=self.order_duration,
            idle_scale=self.vehicle_count,
            order_scale=self.orders_per_step,
            dest_dim=self.dest_dim,
        )


def _heading(angle_deg: float) -> tuple[float, float]:
    rad = math.radians(angle_deg)
    return math.cos(rad), math.sin(rad)


def _circle_radius(topo: GridTopology) -> float:
    return (min(topo.width, topo.height) - 1) / 2.0


def initial_mu(cfg: EnvConfig) -> tuple[np.ndarray, np.ndarray]:
    """Starting Gaussian mean and drift heading."""
    w, h = cfg.topology.width, cfg.topology.height
    center = np.array([w / 2.0, h / 2.0])
    if cfg.drift_path == "circular":
        return center + np.array([_circle_radius(cfg.topology), 0.0]), np.array([0.0, 1.0])
    return center, np.array(_heading(cfg.drift_angle_deg))


def advance_mu(mu: np.ndarray, heading: np.ndarray, cfg: EnvConfig) -> tuple[np.ndarray, np.ndarray]:
    """Move the order-distribution mean by exactly ``drift_step``.

    The reflecting path flips heading components at the map borders; the
    circular path rotates around the map center with chord length equal to
    the drift step. Both keep the mean inside [0, width] x [0, height].
    """
    d = cfg.drift_step
    if d == 0:
        return mu.copy(), heading.copy()
    w, h = cfg.topology.width, cfg.topology.height
    if cfg.drift_path == "circular":
        center = np.array([w / 2.0, h / 2.0])
        radius = _circle_radius(cfg.topology)
        theta = math.atan2(mu[1] - center[1], mu[0] - center[0])
        theta += 2.0 * math.asin(d / (2.0 * radius))
        nxt = center + radius * np.array([math.cos(theta), math.sin(theta)])
        return nxt, heading.copy()
    # keep the current heading if the full straight step fits, else flip the
    # offending component(s); config validation guarantees one choice fits
    for sx, sy in ((1.0, 1.0), (-1.0, 1.0), (1.0, -1.0), (-1.0, -1.0)):
        cand = np.array([heading[0] * sx, heading[1] * sy])
        nxt = mu + d * cand
        if 0.0 <= nxt[0] <= w and 0.0 <= nxt[1] <= h:
            return nxt, cand
    raise ConfigError("no reflection keeps the drift inside the map; use drift_path='circular'")


def sample_source_grids(
    rng: np.random.Generator, mu: np.ndarray, sigma: float, topo: GridTopology, count: int
) -> np.ndarray:
    """Source cells for new orders: per-axis Gaussian, rounded, clipped."""
    pts = rng.normal(loc=mu, scale=sigma, size=(count, 2))
    a = np.clip(np.rint(pts[:, 0]), 0, topo.width - 1).astype(int)
    b = np.clip(np.rint(pts[:, 1]), 0, topo.height - 1).astype(int)
    return b * topo.width + a


@dataclass
class EnvState:
    timestep: int
    locations: np.ndarray  # (V,) grid of each vehicle (dest applied on arrival)
    available_at: np.ndarray  # (V,) first timestep the vehicle is idle again
    pending_dest: np.ndarray  # (V,) destination while serving, -1 otherwise
    mu: np.ndarray
    mu_heading: np.ndarray
    live_orders: dict[GridId, list[Order]]
    orders_generated: int = 0
    orders_served: int = 0
    income: float = 0.0

    @property
    def vehicles(self) -> tuple[Vehicle, ...]:
        out = []
        for vid in range(self.locations.size):
            idle = self.available_at[vid] <= self.timestep
            out.append(
                Vehicle(
                    id=vid,
                    location=int(self.locations[vid]),
                    status=VehicleStatus.IDLE if idle else VehicleStatus.SERVING,
                    available_at=int(self.available_at[vid]),
                )
            )
        return tuple(out)


@dataclass
class StepOutcome:
    rewards: dict[int, float]
    served: tuple[Order, ...]
    expired: tuple[Order, ...]
    _obs_builder: object = field(repr=False)
    _obs_cache: dict[GridId, Observation] | None = field(default=None, repr=False)

    @property
    def observations(self) -> dict[GridId, Observation]:
        """Per-grid observations after the step (built on first access)."""
        if self._obs_cache is None:
            idle_counts, order_counts, dest = self._obs_builder()
            self._obs_cache = {
                g: Observation(
                    grid=g,
                    idle_count=int(idle_counts[g]),
                    order_count=int(order_counts[g]),
                    dest_distribution=dest[g],
                )
                for g in range(idle_counts.size)
            }
        return self._obs_cache


class OrderDispatchEnv:
    """Stateful episode simulator; one instance is single-threaded."""

    def __init__(self, cfg: EnvConfig, record_trace: bool = False):
        self.cfg = cfg
        self.topo = cfg.topology
        self.record_trace = record_trace
        self.trace: list[dict] = []
        self._rng: np.random.Generator | None = None
        self.state: EnvState | None = None
        w, h = self.topo.width, self.topo.height
        grids = np.arange(self.topo.n_grids)
        self._coord_cols = np.stack(
            [(grids % w) / max(w - 1, 1), (grids // w) / max(h - 1, 1)], axis=1
        )
        # destination coordinates offset to (0, 1] so the all-zero vector of an
        # orderless grid stays distinguishable from any mean of real coords
        self._dest_coord = np.stack([((grids % w) + 1.0) / w, ((grids // w) + 1.0) / h], axis=1)

    def reset(self, episode: int = 0, stream: int = 0) -> EnvState:
        """Start an episode; (seed, stream, episode) fully determine it."""
        cfg = self.cfg
        self._rng = np.random.default_rng([cfg.seed, stream, episode])
        mu, heading = initial_mu(cfg)
        start = sample_source_grids(self._rng, mu, cfg.sigma, self.topo, cfg.vehicle_count)
        self.state = EnvState(
            timestep=0,
            locations=start.copy(),
            available_at=np.zeros(cfg.vehicle_count, dtype=int),
            pending_dest=np.full(cfg.vehicle_count, -1, dtype=int),
            mu=mu,
            mu_heading=heading,
            live_orders={},
        )
        self.trace = []
        self._spawn_orders()
        return self.state

    def _generate_orders(self, rng: np.random.Generator, mu: np.ndarray) -> list[Order]:
        cfg = self.cfg
        sources = sample_source_grids(rng, mu, cfg.sigma, self.topo, cfg.orders_per_step)
        draws = rng.random(cfg.orders_per_step)
        orders = []
        for src, u in zip(sources.tolist(), draws.tolist()):
            nbrs = self.topo.neighbors(src)
            k = int(u * len(nbrs))
            price = cfg.price_coefficient * self.topo.neighbor_distances(src)[k]
            orders.append(Order(source=src, dest=nbrs[k], duration=cfg.order_duration, price=price))
        return orders

    def _spawn_orders(self) -> None:
        state = self.state
        orders = self._generate_orders(self._rng, state.mu)
        state.orders_generated += len(orders)
        grouped: dict[GridId, list[Order]] = {}
        for o in orders:
            grouped.setdefault(o.source, []).append(o)
            if self.record_trace:
                self.trace.append(
                    {
                        "event": "generate",
                        "t": state.timestep,
                        "grid": o.source,
                        "dest": o.dest,
                        "duration": o.duration,
                        "price": o.price,
                    }
                )
        state.live_orders = grouped
        self._refresh_order_arrays()

    def _refresh_order_arrays(self) -> None:
        # parallel field arrays over live orders, grouped like live_orders
        state = self.state
        flat = [o for g in state.live_orders for o in state.live_orders[g]]
        self._order_src = np.array([o.source for o in flat], dtype=int)
        self._order_dest = np.array([o.dest for o in flat], dtype=int)
        self._order_price = np.array([o.price for o in flat])
        self._order_slices = {}
        off = 0
        for g in state.live_orders:
            ln = len(state.live_orders[g])
            self._order_slices[g] = (off, off + ln)
            off += ln

    def order_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, dict[GridId, tuple[int, int]]]:
        """(sources, dests, prices, per-grid slice) views over the live orders."""
        return self._order_src, self._order_dest, self._order_price, self._order_slices

    def step(self, assignments: Mapping[int, Order]) -> StepOutcome:
        """Apply one round of dispatch decisions and advance one timestep.

        ``assignments`` maps vehicle id to a chosen order: either a live real
        order in the vehicle's grid or a virtual stay order. Idle vehicles
        missing from the mapping stay put. Real orders may be taken once.
        """
        cfg, state = self.cfg, self.state
        t = state.timestep
        if t >= cfg.horizon:
            raise ContractViolation(f"episode is over (t={t}, horizon={cfg.horizon})")
        live_ids: dict[int, GridId] = {
            id(o): g for g, orders in state.live_orders.items() for o in orders
        }
        taken: set[int] = set()
        rewards: dict[int, float] = {}
        served: list[Order] = []
        for vid in sorted(assignments):
            order = assignments[vid]
            if not (0 <= vid < cfg.vehicle_count):
                raise ContractViolation(f"unknown vehicle id {vid}")
            if state.available_at[vid] > t:
                raise ContractViolation(f"vehicle {vid} is serving and cannot take an order")
            loc = int(state.locations[vid])
            if order.virtual:
                if order.source != loc:
                    raise ContractViolation(f"virtual order for grid {order.source} given to vehicle in {loc}")
                rewards[vid] = 0.0
                continue
            key = id(order)
            if key in taken:
                raise ContractViolation("real order assigned to two vehicles")
            if live_ids.get(key) != loc:
                raise ContractViolation(f"order is not live in vehicle {vid}'s grid {loc}")
            taken.add(key)
            rewards[vid] = order.price
            served.append(order)
            state.available_at[vid] = t + order.duration
            state.pending_dest[vid] = order.dest
            state.income += order.price
            if self.record_trace:
                self.trace.append(
                    {"event": "serve", "t": t, "grid": loc, "vehicle": vid, "dest": order.dest, "price": order.price}
                )
        state.orders_served += len(served)
        expired = [
            o for g in sorted(state.live_orders) for o in state.live_orders[g] if id(o) not in taken
        ]
        if self.record_trace:
            for o in expired:
                self.trace.append({"event": "expire", "t": t, "grid": o.source, "price": o.price})

        state.timestep = t + 1
        arriving = (state.available_at == state.timestep) & (state.pending_dest >= 0)
        if arriving.any():
            state.locations[arriving] = state.pending_dest[arriving]
            state.pending_dest[arriving] = -1
            if self.record_trace:
                for vid in np.flatnonzero(arriving):
                    self.trace.append(
                        {"event": "arrive", "t": state.timestep, "grid": int(state.locations[vid]), "vehicle": int(vid)}
                    )
        if state.timestep < cfg.horizon:
            state.mu, state.mu_heading = advance_mu(state.mu, state.mu_heading, cfg)
            self._spawn_orders()
        else:
            state.live_orders = {}
            self._refresh_order_arrays()
        return StepOutcome(
            rewards=rewards,
            served=tuple(served),
            expired=tuple(expired),
            _obs_builder=self._snapshot_obs_builder(),
        )

    def idle_vehicles_by_grid(self) -> dict[GridId, list[int]]:
        state = self.state
        idle = np.flatnonzero(state.available_at <= state.timestep)
        grouped: dict[GridId, list[int]] = {}
        for vid in idle:
            grouped.setdefault(int(state.locations[vid]), []).append(int(vid))
        return grouped

    def _count_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        state = self.state
        return self._count_arrays_from(state.locations, state.available_at, state.timestep, state.live_orders)

    def _count_arrays_from(
        self,
        locations: np.ndarray,
        available_at: np.ndarray,
        timestep: int,
        live_orders: dict[GridId, list[Order]],
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        n = self.topo.n_grids
        idle = available_at <= timestep
        idle_counts = np.bincount(locations[idle], minlength=n)
        order_counts = np.zeros(n, dtype=int)
        dest = np.zeros((n, self.cfg.dest_dim))
        for g, orders in live_orders.items():
            order_counts[g] = len(orders)
            if self.cfg.dest_encoding == "coords_mean":
                acc = np.zeros(2)
                for o in orders:
                    acc += self._dest_coord[o.dest]
                dest[g] = acc / len(orders)
            else:
                for o in orders:
                    dest[g, o.dest] += 1.0
                dest[g] /= len(orders)
        return idle_counts, order_counts, dest

    def _snapshot_obs_builder(self):
        # live_orders dicts are replaced, never mutated, so holding the
        # reference freezes them; vehicle arrays mutate and must be copied
        state = self.state
        locations = state.locations.copy()
        available_at = state.available_at.copy()
        timestep = state.timestep
        live = state.live_orders
        return lambda: self._count_arrays_from(locations, available_at, timestep, live)

    def observations(self) -> dict[GridId, Observation]:
        idle_counts, order_counts, dest = self._count_arrays()
        return {
            g: Observation(
                grid=g,
                idle_count=int(idle_counts[g]),
                order_count=int(order_counts[g]),
                dest_distribution=dest[g],
            )
            for g in range(self.topo.n_grids)
        }

    def encoded_observations(self, codec: FeatureCodec) -> np.ndarray:
        """(n_grids, obs_dim) matrix equal to encoding every grid's Observation."""
        idle_counts, order_counts, dest = self._count_arrays()
        idle = np.minimum(idle_counts, codec.idle_scale) / codec.idle_scale
        cnt = np.minimum(order_counts, codec.order_scale) / codec.order_scale
        return np.concatenate([self._coord_cols, idle[:, None], cnt[:, None], dest], axis=1)

    def metrics(self) -> tuple[float, float]:
        """(ADI, ORR): summed served prices and served / generated real orders."""
        state = self.state
        orr = state.orders_served / state.orders_generated if state.orders_generated else 0.0
        return state.income, orr
