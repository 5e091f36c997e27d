"""Grid topology, orders, vehicles and the feature encodings shared by the
simulator, the dispatch policies and the trainer.

Grids are flat integer ids: row-major ``row * width + col`` on square maps,
axial ``r * width + q`` on hexagonal maps. All types are immutable values;
they can be shared freely between threads or processes.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

GridId = int


class DomainError(ValueError):
    """Invalid domain object or out-of-range grid reference."""


class ConfigError(ValueError):
    """Rejected configuration value."""


class ContractViolation(RuntimeError):
    """A caller broke an operation precondition."""


class TopologyKind(str, Enum):
    SQUARE8 = "square8"
    HEX6 = "hex6"


# Moore neighbourhood for square grids; the six axial offsets for hex grids.
_SQUARE8_OFFSETS = ((-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1))
_HEX6_OFFSETS = ((1, 0), (-1, 0), (0, 1), (0, -1), (1, -1), (-1, 1))


@dataclass(frozen=True)
class GridTopology:
    """A bounded grid map with a fixed neighbour relation (no wraparound)."""

    kind: TopologyKind
    width: int
    height: int
    _neighbor_table: tuple = field(init=False, repr=False, compare=False)
    _centers: np.ndarray = field(init=False, repr=False, compare=False)
    _neighbor_dists: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ConfigError(f"grid dimensions must be positive, got {self.width}x{self.height}")
        kind = TopologyKind(self.kind)
        object.__setattr__(self, "kind", kind)
        offsets = _SQUARE8_OFFSETS if kind is TopologyKind.SQUARE8 else _HEX6_OFFSETS
        table = []
        for b in range(self.height):
            for a in range(self.width):
                cell = []
                for da, db in offsets:
                    na, nb = a + da, b + db
                    if 0 <= na < self.width and 0 <= nb < self.height:
                        cell.append(nb * self.width + na)
                table.append(tuple(cell))
        object.__setattr__(self, "_neighbor_table", tuple(table))
        centers = np.empty((self.n_grids, 2))
        for g in range(self.n_grids):
            a, b = g % self.width, g // self.width
            if kind is TopologyKind.SQUARE8:
                centers[g] = (a, b)
            else:
                # axial -> cartesian with unit spacing between adjacent cells
                centers[g] = (a + 0.5 * b, b * math.sqrt(3.0) / 2.0)
        centers.setflags(write=False)
        object.__setattr__(self, "_centers", centers)
        dists = tuple(
            tuple(float(np.linalg.norm(centers[g] - centers[nb])) for nb in table[g])
            for g in range(self.n_grids)
        )
        object.__setattr__(self, "_neighbor_dists", dists)

    @classmethod
    def square8(cls, width: int, height: int | None = None) -> "GridTopology":
        return cls(TopologyKind.SQUARE8, width, height if height is not None else width)

    @classmethod
    def hex6(cls, width: int, height: int | None = None) -> "GridTopology":
        return cls(TopologyKind.HEX6, width, height if height is not None else width)

    @property
    def n_grids(self) -> int:
        return self.width * self.height

    def coords(self, g: GridId) -> tuple[int, int]:
        """(col, row) on square maps, axial (q, r) on hex maps."""
        self._check(g)
        return g % self.width, g // self.width

    def index(self, a: int, b: int) -> GridId:
        if not (0 <= a < self.width and 0 <= b < self.height):
            raise DomainError(f"coordinates ({a}, {b}) outside {self.width}x{self.height} grid")
        return b * self.width + a

    def neighbors(self, g: GridId) -> tuple[GridId, ...]:
        self._check(g)
        return self._neighbor_table[g]

    def center(self, g: GridId) -> np.ndarray:
        self._check(g)
        return self._centers[g]

    @property
    def centers(self) -> np.ndarray:
        """(n_grids, 2) cartesian cell centers."""
        return self._centers

    def center_distance(self, g1: GridId, g2: GridId) -> float:
        return float(np.linalg.norm(self.center(g1) - self.center(g2)))

    def neighbor_distances(self, g: GridId) -> tuple[float, ...]:
        """Center distances to each entry of ``neighbors(g)``, same order."""
        self._check(g)
        return self._neighbor_dists[g]

    @property
    def max_neighbor_distance(self) -> float:
        return math.sqrt(2.0) if self.kind is TopologyKind.SQUARE8 else 1.0

    def _check(self, g: GridId) -> None:
        if not isinstance(g, (int, np.integer)) or not (0 <= g < self.n_grids):
            raise DomainError(f"grid id {g!r} outside [0, {self.n_grids})")


def neighbors(g: GridId, topo: GridTopology) -> tuple[GridId, ...]:
    """Adjacent grids of ``g``: no duplicates, never contains ``g`` itself."""
    return topo.neighbors(g)


@dataclass(frozen=True)
class Order:
    """A dispatch action: pick up in ``source``, drop off in ``dest``.

    Virtual orders model "stay put": source == dest, zero price. They always
    exist so every idle vehicle has at least one action.
    """

    source: GridId
    dest: GridId
    duration: int = 1
    price: float = 0.0
    virtual: bool = False

    def __post_init__(self) -> None:
        if self.duration < 1:
            raise DomainError(f"order duration must be >= 1, got {self.duration}")
        if self.price < 0:
            raise DomainError(f"order price must be nonnegative, got {self.price}")
        if self.virtual and (self.source != self.dest or self.price != 0.0):
            raise DomainError("virtual orders must have source == dest and zero price")


def virtual_order(grid: GridId) -> Order:
    return Order(source=grid, dest=grid, duration=1, price=0.0, virtual=True)


def validate_order(order: Order, topo: GridTopology) -> None:
    """Check an order against a topology; real orders must go to a neighbour."""
    topo._check(order.source)
    topo._check(order.dest)
    if not order.virtual and order.dest not in topo.neighbors(order.source):
        raise DomainError(f"real order destination {order.dest} is not adjacent to {order.source}")


class VehicleStatus(str, Enum):
    IDLE = "idle"
    SERVING = "serving"


@dataclass(frozen=True)
class Vehicle:
    id: int
    location: GridId
    status: VehicleStatus
    available_at: int


@dataclass(frozen=True)
class Observation:
    """Shared per-grid state: all idle vehicles in a grid observe the same thing."""

    grid: GridId
    idle_count: int
    order_count: int
    dest_distribution: np.ndarray


@dataclass(frozen=True)
class FeatureCodec:
    """Fixed-length float encodings of observations and orders for the value network.

    Coordinates are scaled to [0, 1]; prices by the largest price the
    environment can produce; counts by the configured fleet / order volume.
    ``dest_dim`` is the width of the observation's destination summary and is
    fixed for a whole run.
    """

    topo: GridTopology
    max_price: float
    max_duration: int = 1
    idle_scale: int = 1
    order_scale: int = 1
    dest_dim: int = 2

    @property
    def action_dim(self) -> int:
        return 6

    @property
    def obs_dim(self) -> int:
        return 4 + self.dest_dim

    def _coord_scale(self) -> np.ndarray:
        return np.array([max(self.topo.width - 1, 1), max(self.topo.height - 1, 1)], dtype=float)

    def encode_action(self, order: Order) -> np.ndarray:
        """[source a, source b, dest a, dest b, duration, price], each in [0, 1]."""
        return self.encode_actions([order])[0]

    def encode_actions(self, orders: Sequence[Order]) -> np.ndarray:
        """(len(orders), 6) feature matrix; rows follow input order."""
        m = len(orders)
        src = np.empty(m, dtype=int)
        dst = np.empty(m, dtype=int)
        dur = np.empty(m, dtype=int)
        price = np.empty(m)
        for i, o in enumerate(orders):
            src[i] = o.source
            dst[i] = o.dest
            dur[i] = o.duration
            price[i] = o.price
        return self.encode_action_arrays(src, dst, dur, price)

    def encode_action_arrays(
        self, source: np.ndarray, dest: np.ndarray, duration: np.ndarray | int, price: np.ndarray
    ) -> np.ndarray:
        """Vectorized encoding from parallel order-field arrays."""
        src = np.asarray(source, dtype=int)
        m = src.size
        out = np.empty((m, 6))
        scale = self._coord_scale()
        w = self.topo.width
        dst = np.asarray(dest, dtype=int)
        out[:, 0] = (src % w) / scale[0]
        out[:, 1] = (src // w) / scale[1]
        out[:, 2] = (dst % w) / scale[0]
        out[:, 3] = (dst // w) / scale[1]
        out[:, 4] = np.minimum(duration, self.max_duration) / self.max_duration
        p = np.asarray(price, dtype=float)
        if np.any(p > self.max_price):
            log.warning(
                "order price %.6g exceeds normalization bound %.6g; clamping", p.max(), self.max_price
            )
            p = np.minimum(p, self.max_price)
        out[:, 5] = p / self.max_price if self.max_price > 0 else p
        return out

    def encode_observation(self, obs: Observation) -> np.ndarray:
        """[grid a, grid b, idle count, order count, dest summary...], bounded entries."""
        scale = self._coord_scale()
        a, b = obs.grid % self.topo.width, obs.grid // self.topo.width
        head = np.array(
            [
                a / scale[0],
                b / scale[1],
                min(obs.idle_count, self.idle_scale) / self.idle_scale,
                min(obs.order_count, self.order_scale) / self.order_scale,
            ]
        )
        dest = np.asarray(obs.dest_distribution, dtype=float)
        if dest.shape != (self.dest_dim,):
            raise DomainError(f"dest_distribution has shape {dest.shape}, expected ({self.dest_dim},)")
        return np.concatenate([head, dest])
