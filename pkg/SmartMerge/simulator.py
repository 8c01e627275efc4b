"""Fixed-step simulator of the two-lane merging game.

Lane 0 is the main road, lane 1 the merge lane. Both lanes measure arc-length
from their own start and reach the merge point at the same arc-length, after
which the merge lane continues on the shared segment. Vehicle positions are
vehicle centres.

States are immutable values: every operation returns a new ``VehicleState`` /
``WorldState``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

from .errors import MaskViolationError, SimulationError

log = logging.getLogger(__name__)

DT = 0.2
LANE_LENGTH = 250.0
MERGE_POINT = 150.0
VEHICLE_LENGTH = 4.0
MIN_GAP = 2.0
MERGING_ZONE_RADIUS = 50.0
SPEED_EXEMPTION_RADIUS = 100.0

ACCEL_MIN = -2.0
ACCEL_MAX = 2.0
HARD_BRAKE_ACCEL = -4.0

MAIN_LANE = 0
MERGE_LANE = 1

# float slack used for every bound comparison
EPS = 1e-9

CONTROLLERS: Tuple[str, ...] = ("policy", "robot", "idm", "fsm_idm", "random")


class ActionId(IntEnum):
    DEC2 = 0
    DEC1 = 1
    KEEP = 2
    ACC1 = 3
    ACC2 = 4
    HARD_BRAKE = 5
    RELEASE_BRAKE = 6


N_ACTIONS = len(ActionId)

DELTA_ACCEL: Dict[ActionId, float] = {
    ActionId.DEC2: -0.2,
    ActionId.DEC1: -0.1,
    ActionId.KEEP: 0.0,
    ActionId.ACC1: 0.1,
    ActionId.ACC2: 0.2,
}


@dataclass(frozen=True)
class RoadNetwork:
    """Geometry, limits and priorities of the two lanes."""

    speed_limits: Tuple[float, float] = (20.0, 15.0)
    priorities: Tuple[int, int] = (1, 0)
    lane_length_m: float = LANE_LENGTH
    merge_point_s: float = MERGE_POINT
    merging_zone_radius_m: float = MERGING_ZONE_RADIUS
    speed_exemption_radius_m: float = SPEED_EXEMPTION_RADIUS

    def __post_init__(self) -> None:
        if not 0.0 < self.merge_point_s < self.lane_length_m:
            raise ValueError(
                f"merge point {self.merge_point_s} must lie inside (0, {self.lane_length_m})"
            )
        if len(self.speed_limits) != 2 or len(self.priorities) != 2:
            raise ValueError("a merging road has exactly two lanes")
        if any(limit <= 0.0 for limit in self.speed_limits):
            raise ValueError(f"speed limits must be positive, got {self.speed_limits}")
        if any(p not in (0, 1) for p in self.priorities):
            raise ValueError(f"lane priorities must be 0 or 1, got {self.priorities}")

    @property
    def max_speed_limit(self) -> float:
        return max(self.speed_limits)


@dataclass(frozen=True)
class BehaviorParams:
    b_prio: int
    b_type: float

    def __post_init__(self) -> None:
        if self.b_prio not in (0, 1):
            raise ValueError(f"b_prio must be 0 or 1, got {self.b_prio}")
        if not -2.0 <= self.b_type <= 2.0:
            raise ValueError(f"b_type must lie in [-2, 2], got {self.b_type}")


@dataclass(frozen=True)
class VehicleState:
    id: int
    lane: int
    s: float
    v: float
    a: float
    behavior: BehaviorParams
    controller: str = "policy"
    post_brake: bool = False
    active: bool = False
    finished: bool = False
    collided: bool = False
    entry_time_s: float = 0.0
    entered_step: Optional[int] = None
    finished_step: Optional[int] = None

    @property
    def done(self) -> bool:
        return self.finished or self.collided

    @property
    def pending(self) -> bool:
        """Scheduled but not yet on the road."""
        return not self.active and not self.done


@dataclass(frozen=True)
class StepEvents:
    collisions: Tuple[Tuple[int, int], ...] = ()
    finishes: Tuple[int, ...] = ()
    hard_brakes: Tuple[int, ...] = ()
    hard_brakes_in_zone: Tuple[int, ...] = ()

    @property
    def collided_ids(self) -> Tuple[int, ...]:
        return tuple(sorted({vid for pair in self.collisions for vid in pair}))

    def is_empty(self) -> bool:
        return not (self.collisions or self.finishes or self.hard_brakes)


@dataclass(frozen=True)
class WorldState:
    road: RoadNetwork
    vehicles: Tuple[VehicleState, ...]
    t: int = 0
    dt: float = DT
    events: StepEvents = field(default_factory=StepEvents)

    def __post_init__(self) -> None:
        for index, vehicle in enumerate(self.vehicles):
            if vehicle.id != index:
                raise ValueError(f"vehicle ids must match their index, got id {vehicle.id} at {index}")

    @property
    def time_s(self) -> float:
        return self.t * self.dt

    def vehicle(self, vehicle_id: int) -> VehicleState:
        if not 0 <= vehicle_id < len(self.vehicles):
            raise KeyError(f"Id {vehicle_id} does not exist.")
        return self.vehicles[vehicle_id]

    def active_vehicles(self) -> List[VehicleState]:
        return [v for v in self.vehicles if v.active]

    def all_done(self) -> bool:
        return all(v.done for v in self.vehicles)


# --- geometry ---------------------------------------------------------------

def path_coordinate(vehicle: VehicleState, road: RoadNetwork) -> float:
    """Merge-aligned coordinate: negative before the merge point, positive after."""
    return vehicle.s - road.merge_point_s


def dist_to_merge(vehicle: VehicleState, road: RoadNetwork) -> float:
    return road.merge_point_s - vehicle.s


def physical_lane(vehicle: VehicleState, road: RoadNetwork) -> int:
    """Lane the vehicle physically drives on; merged vehicles are on the main road."""
    if vehicle.lane == MAIN_LANE or path_coordinate(vehicle, road) >= 0.0:
        return MAIN_LANE
    return MERGE_LANE


def share_path(first: VehicleState, second: VehicleState, road: RoadNetwork) -> bool:
    if first.lane == second.lane:
        return True
    return path_coordinate(first, road) >= 0.0 and path_coordinate(second, road) >= 0.0


def in_merging_zone(vehicle: VehicleState, road: RoadNetwork) -> bool:
    return abs(path_coordinate(vehicle, road)) <= road.merging_zone_radius_m


def lane_speed_limit(vehicle: VehicleState, road: RoadNetwork) -> float:
    return road.speed_limits[physical_lane(vehicle, road)]


def applicable_speed_limit(vehicle: VehicleState, road: RoadNetwork) -> float:
    """Speed limit enforced on the vehicle, including the merge-lane exemption."""
    remaining = dist_to_merge(vehicle, road)
    if vehicle.lane == MERGE_LANE and 0.0 < remaining < road.speed_exemption_radius_m:
        return road.max_speed_limit
    return lane_speed_limit(vehicle, road)


def priority_for(vehicle: VehicleState, road: RoadNetwork) -> int:
    """Road priority of the lane the vehicle currently occupies."""
    return road.priorities[physical_lane(vehicle, road)]


def path_leader(world: WorldState, vehicle: VehicleState) -> Optional[VehicleState]:
    """Nearest vehicle ahead on the vehicle's path.

    The path is the vehicle's own lane up to the merge point followed by the
    shared segment, so merged vehicles ahead count whichever lane they came from.
    """
    road = world.road
    d_self = path_coordinate(vehicle, road)
    leader: Optional[VehicleState] = None
    best = math.inf
    for other in world.vehicles:
        if other.id == vehicle.id or not other.active:
            continue
        d_other = path_coordinate(other, road)
        if d_other <= d_self:
            continue
        if other.lane != vehicle.lane and d_other < 0.0:
            continue
        if d_other < best:
            best, leader = d_other, other
    return leader


def bumper_gap(follower: VehicleState, leader: VehicleState, road: RoadNetwork) -> float:
    return path_coordinate(leader, road) - path_coordinate(follower, road) - VEHICLE_LENGTH


def entry_clearance(v_follow: float, v_lead: float) -> float:
    """Bumper gap a pair needs at placement so the follower can still stop behind."""
    return MIN_GAP + max(0.0, v_follow ** 2 - v_lead ** 2) / (2.0 * abs(HARD_BRAKE_ACCEL))


# --- vehicle dynamics -------------------------------------------------------

def resulting_acceleration(a: float, post_brake: bool, action: ActionId) -> Optional[float]:
    """Acceleration after ``action``; ``None`` when the action is not applicable."""
    action = ActionId(action)
    if action == ActionId.HARD_BRAKE:
        return HARD_BRAKE_ACCEL
    if action == ActionId.RELEASE_BRAKE:
        return 0.0 if post_brake else None
    return min(ACCEL_MAX, max(ACCEL_MIN, round(a + DELTA_ACCEL[action], 10)))


def apply_action(vehicle: VehicleState, action: ActionId) -> VehicleState:
    action = ActionId(action)
    a_next = resulting_acceleration(vehicle.a, vehicle.post_brake, action)
    if a_next is None:
        raise MaskViolationError(
            f"vehicle {vehicle.id}: release_brake issued without a preceding hard brake"
        )
    return replace(vehicle, a=a_next, post_brake=action == ActionId.HARD_BRAKE)


def integrate(vehicle: VehicleState, dt: float = DT) -> VehicleState:
    """Advance position and speed over ``dt`` under constant acceleration, never reversing."""
    if dt <= 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    v, a = vehicle.v, vehicle.a
    v_next = v + a * dt
    if v_next >= 0.0:
        s_next = vehicle.s + v * dt + 0.5 * a * dt * dt
    else:
        t_stop = -v / a
        s_next = vehicle.s + v * t_stop + 0.5 * a * t_stop * t_stop
        v_next = 0.0
    return replace(vehicle, s=s_next, v=v_next)


def speed_after(vehicle: VehicleState, action: ActionId, dt: float = DT) -> Optional[float]:
    """One-step lookahead speed under ``action``."""
    a_next = resulting_acceleration(vehicle.a, vehicle.post_brake, action)
    if a_next is None:
        return None
    return max(0.0, vehicle.v + a_next * dt)


# --- world ------------------------------------------------------------------

def _colliding_pairs(vehicles: Sequence[VehicleState], road: RoadNetwork) -> List[Tuple[int, int]]:
    pairs: List[Tuple[int, int]] = []
    ordered = sorted(vehicles, key=lambda v: v.id)
    for i, first in enumerate(ordered):
        for second in ordered[i + 1:]:
            if not share_path(first, second, road):
                continue
            gap = abs(path_coordinate(first, road) - path_coordinate(second, road))
            if gap < VEHICLE_LENGTH:
                pairs.append((first.id, second.id))
    return pairs


def detect_collisions(world: WorldState) -> List[Tuple[int, int]]:
    return _colliding_pairs(world.active_vehicles(), world.road)


def _entry_clear(candidate: VehicleState, present: Sequence[VehicleState], road: RoadNetwork) -> bool:
    d_cand = path_coordinate(candidate, road)
    for other in present:
        if not share_path(candidate, other, road):
            continue
        d_other = path_coordinate(other, road)
        if abs(d_other - d_cand) < VEHICLE_LENGTH + MIN_GAP:
            return False
        if d_other > d_cand:
            needed = entry_clearance(candidate.v, other.v)
            gap = d_other - d_cand - VEHICLE_LENGTH
        else:
            needed = entry_clearance(other.v, candidate.v)
            gap = d_cand - d_other - VEHICLE_LENGTH
        if gap < needed:
            return False
    return True


def activate_due(vehicles: List[VehicleState], road: RoadNetwork, step: int, dt: float = DT) -> List[int]:
    """Put scheduled vehicles whose entry time has come on the road, in place.

    A vehicle whose entry region is occupied stays pending and retries on the
    next step.
    """
    now = step * dt
    due = sorted(
        (v for v in vehicles if v.pending and v.entry_time_s <= now + EPS),
        key=lambda v: (v.entry_time_s, v.id),
    )
    entered: List[int] = []
    for candidate in due:
        present = [v for v in vehicles if v.active]
        if not _entry_clear(candidate, present, road):
            log.debug("entry of vehicle %d delayed at step %d", candidate.id, step)
            continue
        vehicles[candidate.id] = replace(
            candidate,
            active=True,
            entered_step=step,
            behavior=replace(candidate.behavior, b_prio=priority_for(candidate, road)),
        )
        entered.append(candidate.id)
    return entered


def step_world(world: WorldState, joint_action: Mapping[int, ActionId]) -> Tuple[WorldState, StepEvents]:
    """Advance every active vehicle synchronously by one decision step."""
    road = world.road
    actions = {int(vid): ActionId(action) for vid, action in joint_action.items()}
    active_ids = sorted(v.id for v in world.vehicles if v.active)

    stray = sorted(set(actions) - set(active_ids))
    if stray:
        raise SimulationError(f"actions given for inactive vehicles {stray}")
    missing = sorted(set(active_ids) - set(actions))
    if missing:
        raise SimulationError(f"no action given for active vehicles {missing}")

    moved = list(world.vehicles)
    hard_brakes: List[int] = []
    in_zone: List[int] = []
    for vid in active_ids:
        vehicle = world.vehicles[vid]
        if actions[vid] == ActionId.HARD_BRAKE:
            hard_brakes.append(vid)
            if in_merging_zone(vehicle, road):
                in_zone.append(vid)
        moved[vid] = integrate(apply_action(vehicle, actions[vid]), world.dt)

    t_next = world.t + 1
    finishes: List[int] = []
    for vid in active_ids:
        if moved[vid].s >= road.lane_length_m:
            moved[vid] = replace(moved[vid], finished=True, active=False, finished_step=t_next)
            finishes.append(vid)

    collisions = _colliding_pairs([moved[vid] for vid in active_ids if moved[vid].active], road)
    for pair in collisions:
        for vid in pair:
            moved[vid] = replace(moved[vid], collided=True, active=False)
    if collisions:
        log.debug("step %d: collisions %s", t_next, collisions)

    for vid in active_ids:
        vehicle = moved[vid]
        if vehicle.active:
            prio = priority_for(vehicle, road)
            if prio != vehicle.behavior.b_prio:
                moved[vid] = replace(vehicle, behavior=replace(vehicle.behavior, b_prio=prio))

    activate_due(moved, road, t_next, world.dt)

    events = StepEvents(
        collisions=tuple(collisions),
        finishes=tuple(finishes),
        hard_brakes=tuple(hard_brakes),
        hard_brakes_in_zone=tuple(in_zone),
    )
    return WorldState(road=road, vehicles=tuple(moved), t=t_next, dt=world.dt, events=events), events
