"""Non-learning controllers: robot world drivers, IDM and FSM+IDM baselines.

Every controller chooses among the actions its combined mask permits, so
baselines are mask-filtered exactly like the learned policy.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import SimulationError
from .masking import ActionMask, IdmParams, action_mask, idm_acceleration
from .simulator import (
    ACCEL_MAX,
    MAIN_LANE,
    MERGE_LANE,
    VEHICLE_LENGTH,
    ActionId,
    VehicleState,
    WorldState,
    bumper_gap,
    lane_speed_limit,
    path_coordinate,
    path_leader,
    physical_lane,
    resulting_acceleration,
)

log = logging.getLogger(__name__)

HARD_BRAKE_THRESHOLD = -2.2
ROBOT_CONFLICT_WINDOW_S = 3.0
FSM_SIMILAR_DISTANCE_M = 10.0
FSM_MIN_VIRTUAL_GAP_M = 0.1


@dataclass(frozen=True)
class FsmState:
    mode: str = "free"
    virtual_leader: Optional[int] = None

    def __post_init__(self) -> None:
        if self.mode not in ("free", "follow_virtual"):
            raise ValueError(f"unknown FSM mode '{self.mode}'")
        if (self.mode == "follow_virtual") != (self.virtual_leader is not None):
            raise ValueError("virtual_leader is set exactly when following a virtual leader")


def quantize_acceleration(target: float, vehicle: VehicleState, mask: ActionMask) -> ActionId:
    """Permitted action whose resulting acceleration is nearest to ``target``.

    Targets below -2.2 m/s² map to hard_brake. Ties go to the lower acceleration.
    """
    if target < HARD_BRAKE_THRESHOLD:
        return ActionId.HARD_BRAKE
    best: Optional[Tuple[float, float, int]] = None
    for action in mask.permitted_actions():
        if action == ActionId.HARD_BRAKE:
            continue
        a_next = resulting_acceleration(vehicle.a, vehicle.post_brake, action)
        if a_next is None:
            continue
        key = (round(abs(a_next - target), 9), a_next, int(action))
        if best is None or key < best:
            best = key
    return ActionId.HARD_BRAKE if best is None else ActionId(best[2])


def leader_acceleration(world: WorldState, vehicle: VehicleState, p: IdmParams) -> float:
    """IDM acceleration against the path leader, desired speed = lane limit."""
    params = p.for_speed_limit(lane_speed_limit(vehicle, world.road))
    leader = path_leader(world, vehicle)
    if leader is None:
        return idm_acceleration(vehicle.v, None, None, params)
    gap = bumper_gap(vehicle, leader, world.road)
    if gap <= 0.0:
        return -math.inf
    return idm_acceleration(vehicle.v, leader.v, gap, params)


def earliest_arrival(distance: float, v: float, v_cap: float, a_max: float = ACCEL_MAX) -> float:
    """Time to cover ``distance`` accelerating at ``a_max`` up to ``v_cap``."""
    if distance <= 0.0:
        return 0.0
    v_cap = max(v_cap, v)
    t_ramp = (v_cap - v) / a_max
    d_ramp = v * t_ramp + 0.5 * a_max * t_ramp ** 2
    if d_ramp >= distance:
        return (-v + math.sqrt(v * v + 2.0 * a_max * distance)) / a_max
    return t_ramp + (distance - d_ramp) / v_cap


def _robot_target(world: WorldState, vehicle: VehicleState, p: IdmParams) -> float:
    road = world.road
    target = leader_acceleration(world, vehicle, p)
    d_self = path_coordinate(vehicle, road)
    if vehicle.lane != MERGE_LANE or d_self >= 0.0:
        return target
    virtual_gap = -d_self - VEHICLE_LENGTH
    if virtual_gap <= 0.0:
        # nose already at the merge point, committed
        return target
    t_self = earliest_arrival(-d_self, vehicle.v, road.max_speed_limit)
    for other in world.vehicles:
        if not other.active or other.lane != MAIN_LANE:
            continue
        d_other = path_coordinate(other, road)
        if d_other >= 0.0:
            continue
        t_other = -d_other / max(other.v, 0.1)
        if abs(t_other - t_self) <= ROBOT_CONFLICT_WINDOW_S:
            params = p.for_speed_limit(lane_speed_limit(vehicle, road))
            return min(target, idm_acceleration(vehicle.v, 0.0, virtual_gap, params))
    return target


def robot_action(world: WorldState, agent_id: int, p: IdmParams = IdmParams(),
                 mask: Optional[ActionMask] = None) -> ActionId:
    """Robot world driver: main lane never yields, merge lane always yields."""
    vehicle = world.vehicle(agent_id)
    mask = mask if mask is not None else action_mask(world, agent_id, p)
    return quantize_acceleration(_robot_target(world, vehicle, p), vehicle, mask)


def idm_action(world: WorldState, agent_id: int, p: IdmParams = IdmParams(),
               mask: Optional[ActionMask] = None) -> ActionId:
    vehicle = world.vehicle(agent_id)
    mask = mask if mask is not None else action_mask(world, agent_id, p)
    return quantize_acceleration(leader_acceleration(world, vehicle, p), vehicle, mask)


def _yields_to(vehicle: VehicleState, other: VehicleState) -> bool:
    if vehicle.behavior.b_prio != other.behavior.b_prio:
        return vehicle.behavior.b_prio < other.behavior.b_prio
    return vehicle.lane == MERGE_LANE


def fsm_idm_action(world: WorldState, agent_id: int, fsm: FsmState = FsmState(),
                   p: IdmParams = IdmParams(), mask: Optional[ActionMask] = None) -> Tuple[ActionId, FsmState]:
    """IDM that also follows an other-lane vehicle at a similar distance to the merge point."""
    road = world.road
    vehicle = world.vehicle(agent_id)
    mask = mask if mask is not None else action_mask(world, agent_id, p)
    target = leader_acceleration(world, vehicle, p)
    d_self = path_coordinate(vehicle, road)

    virtual: Optional[VehicleState] = None
    if d_self < 0.0:
        best = math.inf
        for other in world.vehicles:
            if other.id == agent_id or not other.active:
                continue
            d_other = path_coordinate(other, road)
            if d_other >= 0.0 or physical_lane(other, road) == physical_lane(vehicle, road):
                continue
            separation = d_other - d_self
            if abs(separation) >= FSM_SIMILAR_DISTANCE_M:
                continue
            if separation < 0.0 or (separation == 0.0 and not _yields_to(vehicle, other)):
                continue
            if separation < best:
                best, virtual = separation, other

    if virtual is None:
        return quantize_acceleration(target, vehicle, mask), FsmState()

    gap = max(path_coordinate(virtual, road) - d_self - VEHICLE_LENGTH, FSM_MIN_VIRTUAL_GAP_M)
    params = p.for_speed_limit(lane_speed_limit(vehicle, road))
    target = min(target, idm_acceleration(vehicle.v, virtual.v, gap, params))
    if fsm.virtual_leader != virtual.id:
        log.debug("vehicle %d follows virtual leader %d", agent_id, virtual.id)
    return quantize_acceleration(target, vehicle, mask), FsmState("follow_virtual", virtual.id)


def random_action(world: WorldState, agent_id: int, rng: np.random.Generator,
                  mask: Optional[ActionMask] = None) -> ActionId:
    """Uniform choice among the permitted actions."""
    mask = mask if mask is not None else action_mask(world, agent_id)
    permitted = mask.permitted_actions()
    return permitted[int(rng.integers(len(permitted)))]


@dataclass(frozen=True)
class Decision:
    action: ActionId
    observation: Optional[object] = None
    probabilities: Optional[np.ndarray] = None


class Controller:
    """Base class of every driver; ``decide`` handles a batch of vehicles at once."""

    name = "controller"
    learning = False

    def __init__(self, idm: IdmParams = IdmParams()):
        self.idm = idm

    def decide(self, world: WorldState, vehicle_ids: Sequence[int],
               masks: Mapping[int, ActionMask]) -> Dict[int, Decision]:
        return {vid: Decision(self.action(world, vid, masks[vid])) for vid in vehicle_ids}

    def action(self, world: WorldState, vehicle_id: int, mask: ActionMask) -> ActionId:
        raise NotImplementedError("Subclasses must implement this method")


class RobotController(Controller):
    name = "robot"

    def action(self, world, vehicle_id, mask):
        return robot_action(world, vehicle_id, self.idm, mask)


class IdmController(Controller):
    name = "idm"

    def action(self, world, vehicle_id, mask):
        return idm_action(world, vehicle_id, self.idm, mask)


class FsmIdmController(Controller):
    name = "fsm_idm"

    def __init__(self, idm: IdmParams = IdmParams()):
        super().__init__(idm)
        self.states: Dict[int, FsmState] = {}

    def action(self, world, vehicle_id, mask):
        action, self.states[vehicle_id] = fsm_idm_action(
            world, vehicle_id, self.states.get(vehicle_id, FsmState()), self.idm, mask
        )
        return action


class MaskedRandomController(Controller):
    name = "random"

    def __init__(self, rng: np.random.Generator, idm: IdmParams = IdmParams()):
        super().__init__(idm)
        self.rng = rng

    def action(self, world, vehicle_id, mask):
        return random_action(world, vehicle_id, self.rng, mask)


class ConstantController(Controller):
    """Issues one fixed action whenever permitted, hard_brake otherwise."""

    name = "constant"

    def __init__(self, fixed: ActionId = ActionId.HARD_BRAKE, idm: IdmParams = IdmParams()):
        super().__init__(idm)
        self.fixed = ActionId(fixed)

    def action(self, world, vehicle_id, mask):
        return self.fixed if mask.is_permitted(self.fixed) else ActionId.HARD_BRAKE


def make_controller(tag: str, rng: Optional[np.random.Generator] = None, idm: IdmParams = IdmParams()) -> Controller:
    """Controller for a non-learning controller tag."""
    if tag == "robot":
        return RobotController(idm)
    if tag == "idm":
        return IdmController(idm)
    if tag == "fsm_idm":
        return FsmIdmController(idm)
    if tag == "random":
        if rng is None:
            raise ValueError("a random controller needs a seeded generator")
        return MaskedRandomController(rng, idm)
    raise SimulationError(f"controller '{tag}' has no rule-based implementation")
