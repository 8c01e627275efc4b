"""Per-agent partial observations: behaviour, local state and two lane grids."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .errors import SimulationError
from .simulator import (
    VEHICLE_LENGTH,
    VehicleState,
    WorldState,
    dist_to_merge,
    path_coordinate,
    physical_lane,
)

GRID_CELLS = 400
CELL_SIZE = 0.5
VISIBILITY = 100.0
VEHICLE_CELLS = math.ceil(VEHICLE_LENGTH / CELL_SIZE)
N_SCALARS = 6

# little-endian float32 dump: 6 scalars then cl/ol x occupancy/speed x cells
DUMP_DTYPE = np.dtype("<f4")


@dataclass(frozen=True, eq=False)
class LaneGrid:
    """Occupancy (row 0) and relative speed (row 1) over 400 cells of 0.5 m."""

    cells: np.ndarray

    def __post_init__(self) -> None:
        if self.cells.shape != (2, GRID_CELLS):
            raise ValueError(f"a lane grid has shape (2, {GRID_CELLS}), got {self.cells.shape}")

    @classmethod
    def empty(cls) -> "LaneGrid":
        return cls(np.zeros((2, GRID_CELLS), dtype=np.float64))

    @property
    def occupancy(self) -> np.ndarray:
        return self.cells[0]

    @property
    def relative_speed(self) -> np.ndarray:
        return self.cells[1]

    def occupied_cells(self) -> np.ndarray:
        return np.flatnonzero(self.occupancy)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, LaneGrid) and np.array_equal(self.cells, other.cells)


@dataclass(frozen=True, eq=False)
class AgentObservation:
    priority: int
    driver_type: float
    v: float
    a: float
    dist_to_merge: float
    obs_cl: LaneGrid
    obs_ol: LaneGrid
    post_brake: bool = False

    @property
    def local(self) -> Tuple[float, float, float]:
        return (self.v, self.a, self.dist_to_merge)

    def scalars(self) -> np.ndarray:
        return np.array(
            [self.priority, self.driver_type, self.v, self.a, self.dist_to_merge, float(self.post_brake)],
            dtype=np.float64,
        )

    def image(self) -> np.ndarray:
        """Grids stacked as a (4, 400) image: own lane rows first."""
        return np.vstack([self.obs_cl.cells, self.obs_ol.cells])

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, AgentObservation)
            and np.array_equal(self.scalars(), other.scalars())
            and self.obs_cl == other.obs_cl
            and self.obs_ol == other.obs_ol
        )


def cell_index(offset: float) -> int:
    """Cell whose interval [-100 + 0.5k, -100 + 0.5(k+1)) contains ``offset``."""
    return int(math.floor((offset + VISIBILITY) / CELL_SIZE))


def _rasterize(grid: np.ndarray, offset: float, relative_speed: float) -> None:
    centre = cell_index(offset)
    start = centre - VEHICLE_CELLS // 2
    lo, hi = max(0, start), min(GRID_CELLS, start + VEHICLE_CELLS)
    if lo >= hi:
        return
    grid[0, lo:hi] = 1.0
    grid[1, lo:hi] = relative_speed


def build_observation(world: WorldState, agent_id: int) -> AgentObservation:
    """Observation of one active agent.

    Every other active vehicle within 100 m is drawn on the grid of the lane it
    physically occupies, at its merge-aligned offset from the observer. Farther
    vehicles are drawn first so nearer ones win overlapping cells.
    """
    road = world.road
    agent = world.vehicle(agent_id)
    if not agent.active:
        raise SimulationError(f"vehicle {agent_id} is not active, no observation can be built")

    d_self = path_coordinate(agent, road)
    own_lane = physical_lane(agent, road)
    own = np.zeros((2, GRID_CELLS), dtype=np.float64)
    other = np.zeros((2, GRID_CELLS), dtype=np.float64)

    visible: List[Tuple[float, VehicleState]] = []
    for vehicle in world.vehicles:
        if vehicle.id == agent_id or not vehicle.active:
            continue
        offset = path_coordinate(vehicle, road) - d_self
        if -VISIBILITY <= offset < VISIBILITY:
            visible.append((offset, vehicle))

    for offset, vehicle in sorted(visible, key=lambda item: (-abs(item[0]), -item[1].id)):
        target = own if physical_lane(vehicle, road) == own_lane else other
        _rasterize(target, offset, vehicle.v - agent.v)

    return AgentObservation(
        priority=agent.behavior.b_prio,
        driver_type=agent.behavior.b_type,
        v=agent.v,
        a=agent.a,
        dist_to_merge=dist_to_merge(agent, road),
        obs_cl=LaneGrid(own),
        obs_ol=LaneGrid(other),
        post_brake=agent.post_brake,
    )


def dump_observation(obs: AgentObservation) -> bytes:
    return np.concatenate([obs.scalars(), obs.image().ravel()]).astype(DUMP_DTYPE).tobytes()


def load_observation(data: bytes) -> AgentObservation:
    expected = (N_SCALARS + 4 * GRID_CELLS) * DUMP_DTYPE.itemsize
    if len(data) != expected:
        raise ValueError(f"an observation dump is {expected} bytes, got {len(data)}")
    flat = np.frombuffer(data, dtype=DUMP_DTYPE).astype(np.float64)
    scalars, image = flat[:N_SCALARS], flat[N_SCALARS:].reshape(4, GRID_CELLS)
    return AgentObservation(
        priority=int(scalars[0]),
        driver_type=float(scalars[1]),
        v=float(scalars[2]),
        a=float(scalars[3]),
        dist_to_merge=float(scalars[4]),
        obs_cl=LaneGrid(image[:2].copy()),
        obs_ol=LaneGrid(image[2:].copy()),
        post_brake=bool(scalars[5]),
    )
