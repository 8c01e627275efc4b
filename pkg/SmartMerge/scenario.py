"""Scenario specs: the serializable description of one episode's traffic."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from .errors import ScenarioError
from .simulator import (
    CONTROLLERS,
    DT,
    LANE_LENGTH,
    MAIN_LANE,
    MERGE_LANE,
    MIN_GAP,
    VEHICLE_LENGTH,
    BehaviorParams,
    RoadNetwork,
    VehicleState,
    WorldState,
    activate_due,
    entry_clearance,
)

log = logging.getLogger(__name__)

SEED_MAX = 2 ** 64


@dataclass(frozen=True)
class VehicleEntry:
    lane: int
    entry_time_s: float
    initial_s: float
    initial_v: float
    b_type: float
    controller: str = "policy"


@dataclass(frozen=True)
class ScenarioSpec:
    seed: int
    vehicles: Tuple[VehicleEntry, ...]
    speed_limits: Tuple[float, float] = (20.0, 15.0)
    priorities: Tuple[int, int] = (1, 0)

    def road(self) -> RoadNetwork:
        return RoadNetwork(speed_limits=tuple(self.speed_limits), priorities=tuple(self.priorities))

    def validate(self) -> "ScenarioSpec":
        """Check every invariant, raising ``ScenarioError`` naming the field at fault."""
        if not 0 <= int(self.seed) < SEED_MAX:
            raise ScenarioError(f"seed: {self.seed} is not a 64-bit unsigned integer")
        if len(self.speed_limits) != 2 or any(limit <= 0 for limit in self.speed_limits):
            raise ScenarioError(f"speed_limits: {self.speed_limits} must be two positive speeds")
        if len(self.priorities) != 2 or any(p not in (0, 1) for p in self.priorities):
            raise ScenarioError(f"priorities: {self.priorities} must be two values in {{0, 1}}")
        if not self.vehicles:
            raise ScenarioError("vehicles: a scenario needs at least one vehicle")

        for i, entry in enumerate(self.vehicles):
            where = f"vehicles[{i}]"
            if entry.lane not in (MAIN_LANE, MERGE_LANE):
                raise ScenarioError(f"{where}.lane: {entry.lane} is not 0 (main) or 1 (merge)")
            if entry.entry_time_s < 0:
                raise ScenarioError(f"{where}.entry_time_s: {entry.entry_time_s} must be >= 0")
            if not 0.0 <= entry.initial_s < LANE_LENGTH:
                raise ScenarioError(f"{where}.initial_s: {entry.initial_s} outside [0, {LANE_LENGTH})")
            limit = self.speed_limits[entry.lane]
            if not 0.0 <= entry.initial_v <= limit:
                raise ScenarioError(f"{where}.initial_v: {entry.initial_v} outside [0, {limit}] (lane speed limit)")
            if not -2.0 <= entry.b_type <= 2.0:
                raise ScenarioError(f"{where}.b_type: {entry.b_type} outside [-2, 2]")
            if entry.controller not in CONTROLLERS:
                raise ScenarioError(f"{where}.controller: '{entry.controller}' is not one of {list(CONTROLLERS)}")

        needed = VEHICLE_LENGTH + MIN_GAP
        for i, first in enumerate(self.vehicles):
            for j in range(i + 1, len(self.vehicles)):
                second = self.vehicles[j]
                if first.lane != second.lane or first.entry_time_s != second.entry_time_s:
                    continue
                if abs(first.initial_s - second.initial_s) < needed:
                    raise ScenarioError(
                        f"vehicles[{i}], vehicles[{j}]: same-lane gap invariant violated, "
                        f"|{first.initial_s} - {second.initial_s}| < {needed} m"
                    )
        return self

    def to_dict(self) -> Dict[str, Any]:
        return {
            "seed": int(self.seed),
            "speed_limits": [float(x) for x in self.speed_limits],
            "priorities": [int(x) for x in self.priorities],
            "vehicles": [asdict(entry) for entry in self.vehicles],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ScenarioSpec":
        if not isinstance(data, dict):
            raise ScenarioError("scenario: top level must be a JSON object")
        for key in ("seed", "vehicles"):
            if key not in data:
                raise ScenarioError(f"{key}: missing required field")
        if not isinstance(data["vehicles"], list):
            raise ScenarioError("vehicles: expected a list of vehicle objects")
        entries: List[VehicleEntry] = []
        for i, raw in enumerate(data["vehicles"]):
            if not isinstance(raw, dict):
                raise ScenarioError(f"vehicles[{i}]: expected a vehicle object, got {type(raw).__name__}")
            try:
                entries.append(VehicleEntry(
                    lane=int(raw["lane"]),
                    entry_time_s=float(raw.get("entry_time_s", 0.0)),
                    initial_s=float(raw.get("initial_s", 0.0)),
                    initial_v=float(raw["initial_v"]),
                    b_type=float(raw["b_type"]),
                    controller=str(raw.get("controller", "policy")),
                ))
            except KeyError as err:
                raise ScenarioError(f"vehicles[{i}].{err.args[0]}: missing required field") from err
            except (TypeError, ValueError) as err:
                raise ScenarioError(f"vehicles[{i}]: {err}") from err
        return cls(
            seed=int(data["seed"]),
            vehicles=tuple(entries),
            speed_limits=tuple(float(x) for x in data.get("speed_limits", (20.0, 15.0))),
            priorities=tuple(int(x) for x in data.get("priorities", (1, 0))),
        ).validate()

    @classmethod
    def from_json(cls, text: str) -> "ScenarioSpec":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as err:
            raise ScenarioError(f"scenario: invalid JSON at line {err.lineno}: {err.msg}") from err
        return cls.from_dict(data)

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ScenarioSpec":
        path = Path(path)
        if not path.exists():
            raise ScenarioError(f"path: {path} does not exist, please provide correct path")
        return cls.from_json(path.read_text())

    def with_controllers(self, controllers: Dict[int, str]) -> "ScenarioSpec":
        """Copy with some vehicles' controller tags replaced."""
        vehicles = tuple(
            replace(entry, controller=controllers.get(i, entry.controller))
            for i, entry in enumerate(self.vehicles)
        )
        return replace(self, vehicles=vehicles)


@dataclass(frozen=True)
class ScenarioRandomization:
    """Ranges random scenarios are drawn from."""

    agent_count: Tuple[int, int] = (2, 8)
    entry_window_s: Tuple[float, float] = (0.0, 20.0)
    initial_speed: Tuple[float, float] = (8.0, 15.0)
    initial_fraction: float = 0.5
    initial_span_m: float = 120.0
    speed_limits: Tuple[float, float] = (20.0, 15.0)
    priorities: Tuple[int, int] = (1, 0)
    equal_priority_prob: float = 0.0
    controller: str = "policy"
    policy_agents: Optional[int] = None
    background_controller: str = "robot"
    max_attempts: int = 200

    def validate(self) -> "ScenarioRandomization":
        lo, hi = self.agent_count
        if not 1 <= lo <= hi:
            raise ScenarioError(f"agent_count: {self.agent_count} must satisfy 1 <= min <= max")
        if not 0.0 <= self.entry_window_s[0] <= self.entry_window_s[1]:
            raise ScenarioError(f"entry_window_s: {self.entry_window_s} is not an ordered non-negative window")
        if not 0.0 <= self.initial_speed[0] <= self.initial_speed[1]:
            raise ScenarioError(f"initial_speed: {self.initial_speed} is not an ordered non-negative range")
        if not 0.0 <= self.initial_fraction <= 1.0 or not 0.0 <= self.equal_priority_prob <= 1.0:
            raise ScenarioError("initial_fraction and equal_priority_prob must lie in [0, 1]")
        if not 0.0 <= self.initial_span_m < LANE_LENGTH:
            raise ScenarioError(f"initial_span_m: {self.initial_span_m} outside [0, {LANE_LENGTH})")
        for tag in (self.controller, self.background_controller):
            if tag not in CONTROLLERS:
                raise ScenarioError(f"controller: '{tag}' is not one of {list(CONTROLLERS)}")
        if self.policy_agents is not None and self.policy_agents < 0:
            raise ScenarioError(f"policy_agents: {self.policy_agents} must be >= 0")
        return self


def _fits(candidate: VehicleEntry, placed: List[VehicleEntry]) -> bool:
    for other in placed:
        if other.lane != candidate.lane or other.entry_time_s != candidate.entry_time_s:
            continue
        if other.initial_s >= candidate.initial_s:
            follower, leader = candidate, other
        else:
            follower, leader = other, candidate
        gap = leader.initial_s - follower.initial_s - VEHICLE_LENGTH
        if gap < entry_clearance(follower.initial_v, leader.initial_v):
            return False
    return True


def generate_scenario(seed: int, config: ScenarioRandomization) -> ScenarioSpec:
    """Draw a random scenario; the same ``(seed, config)`` always yields the same spec.

    Parameters
    ----------
    seed : int
        64-bit unsigned seed, stored in the spec.
    config : ScenarioRandomization
        Ranges for agent count, entry times and initial speeds.

    Returns
    -------
    ScenarioSpec
        A validated spec.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    lo, hi = config.agent_count
    n_agents = int(rng.integers(lo, hi + 1))

    # the two initial spans plus one late entry per lane is the most the road can seat at once
    capacity = 2 * int(config.initial_span_m // (VEHICLE_LENGTH + MIN_GAP) + 1)
    if config.initial_fraction >= 1.0 and n_agents > capacity:
        raise ScenarioError(
            f"agent_count: {n_agents} vehicles do not fit in an initial span of {config.initial_span_m} m"
        )

    priorities = tuple(config.priorities)
    if config.equal_priority_prob > 0.0 and rng.random() < config.equal_priority_prob:
        priorities = (1, 1)

    placed: List[VehicleEntry] = []
    for i in range(n_agents):
        for _ in range(config.max_attempts):
            lane = int(rng.integers(0, 2))
            limit = config.speed_limits[lane]
            v = float(rng.uniform(config.initial_speed[0], min(config.initial_speed[1], limit)))
            if rng.random() < config.initial_fraction:
                entry_time, s = 0.0, float(rng.uniform(0.0, config.initial_span_m))
            else:
                entry_time = float(rng.uniform(max(DT, config.entry_window_s[0]), max(DT, config.entry_window_s[1])))
                s = 0.0
            candidate = VehicleEntry(
                lane=lane,
                entry_time_s=entry_time,
                initial_s=s,
                initial_v=v,
                b_type=float(rng.uniform(-2.0, 2.0)),
                controller=config.controller,
            )
            if _fits(candidate, placed):
                placed.append(candidate)
                break
        else:
            raise ScenarioError(
                f"agent_count: could not place vehicle {i} of {n_agents} after "
                f"{config.max_attempts} attempts, too many vehicles for the road"
            )

    if config.policy_agents is not None:
        chosen = set(rng.choice(n_agents, size=min(config.policy_agents, n_agents), replace=False).tolist())
        placed = [
            replace(entry, controller=config.controller if i in chosen else config.background_controller)
            for i, entry in enumerate(placed)
        ]

    spec = ScenarioSpec(
        seed=int(seed),
        vehicles=tuple(placed),
        speed_limits=tuple(config.speed_limits),
        priorities=priorities,
    )
    log.debug("scenario %d: %d vehicles, priorities %s", seed, n_agents, priorities)
    return spec.validate()


def build_world(spec: ScenarioSpec) -> WorldState:
    """Initial world of a scenario, with vehicles due at t = 0 already on the road."""
    road = spec.road()
    vehicles: List[VehicleState] = [
        VehicleState(
            id=i,
            lane=entry.lane,
            s=entry.initial_s,
            v=entry.initial_v,
            a=0.0,
            behavior=BehaviorParams(b_prio=road.priorities[entry.lane], b_type=entry.b_type),
            controller=entry.controller,
            entry_time_s=entry.entry_time_s,
        )
        for i, entry in enumerate(spec.vehicles)
    ]
    activate_due(vehicles, road, step=0, dt=DT)
    return WorldState(road=road, vehicles=tuple(vehicles), t=0, dt=DT)
