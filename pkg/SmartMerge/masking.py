"""Permitted-action masks: kinematic, traffic-rule and safety restrictions.

Each mask names forbidden actions; the combined mask forbids the union, so an
action is permitted only when all three masks permit it. ``hard_brake`` is
never forbidden.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import FrozenSet, Iterable, Optional, Tuple

import numpy as np

from .errors import SimulationError
from .simulator import (
    ACCEL_MAX,
    ACCEL_MIN,
    DELTA_ACCEL,
    EPS,
    HARD_BRAKE_ACCEL,
    N_ACTIONS,
    ActionId,
    RoadNetwork,
    VehicleState,
    WorldState,
    applicable_speed_limit,
    bumper_gap,
    path_leader,
    resulting_acceleration,
    speed_after,
)

SAFETY_TOLERANCE = 0.05


@dataclass(frozen=True)
class IdmParams:
    a_max: float = 2.0
    b_comf: float = 2.0
    v0: float = 20.0
    delta: float = 4.0
    s0: float = 2.0
    t_headway: float = 1.5

    def __post_init__(self) -> None:
        for name in ("a_max", "b_comf", "v0", "delta", "s0", "t_headway"):
            if getattr(self, name) <= 0:
                raise ValueError(f"IDM parameter {name} must be positive, got {getattr(self, name)}")

    def for_speed_limit(self, v0: float) -> "IdmParams":
        return self if v0 == self.v0 else replace(self, v0=v0)


def idm_acceleration(v: float, v_lead: Optional[float], gap: Optional[float], p: IdmParams) -> float:
    """Intelligent driver model acceleration, clamped to the actuation range [-4, 2].

    Parameters
    ----------
    v : float
        Own speed, m/s.
    v_lead : float or None
        Leader speed; ``None`` on a free road.
    gap : float or None
        Bumper-to-bumper gap to the leader, m.
    p : IdmParams
        Model parameters, ``p.v0`` being the desired speed.
    """
    free = 1.0 - (v / p.v0) ** p.delta
    interaction = 0.0
    if v_lead is not None:
        if gap is None or gap <= 0.0:
            raise SimulationError(f"IDM gap must be positive when a leader exists, got {gap}")
        dv = v - v_lead
        s_star = p.s0 + max(0.0, v * p.t_headway + v * dv / (2.0 * math.sqrt(p.a_max * p.b_comf)))
        interaction = (s_star / gap) ** 2
    accel = p.a_max * (free - interaction)
    return min(ACCEL_MAX, max(HARD_BRAKE_ACCEL, accel))


@dataclass(frozen=True)
class ActionMask:
    permitted: Tuple[bool, ...]

    def __post_init__(self) -> None:
        if len(self.permitted) != N_ACTIONS:
            raise ValueError(f"an action mask has {N_ACTIONS} entries, got {len(self.permitted)}")

    @classmethod
    def all_permitted(cls) -> "ActionMask":
        return cls((True,) * N_ACTIONS)

    @classmethod
    def forbidding(cls, actions: Iterable[ActionId]) -> "ActionMask":
        banned = {int(a) for a in actions}
        return cls(tuple(i not in banned for i in range(N_ACTIONS)))

    @classmethod
    def from_array(cls, values: np.ndarray) -> "ActionMask":
        return cls(tuple(bool(x) for x in values))

    @property
    def forbidden(self) -> FrozenSet[ActionId]:
        return frozenset(ActionId(i) for i, ok in enumerate(self.permitted) if not ok)

    def is_permitted(self, action: ActionId) -> bool:
        return self.permitted[int(action)]

    def permitted_actions(self) -> Tuple[ActionId, ...]:
        return tuple(ActionId(i) for i, ok in enumerate(self.permitted) if ok)

    def as_array(self) -> np.ndarray:
        return np.array(self.permitted, dtype=bool)

    def __str__(self) -> str:
        return "".join("1" if ok else "0" for ok in self.permitted)


def kinematic_mask(vehicle: VehicleState) -> ActionMask:
    banned = []
    for action, delta in DELTA_ACCEL.items():
        raw = vehicle.a + delta
        if raw > ACCEL_MAX + EPS or raw < ACCEL_MIN - EPS:
            banned.append(action)
    if not vehicle.post_brake:
        banned.append(ActionId.RELEASE_BRAKE)
    return ActionMask.forbidding(banned)


def rule_mask(vehicle: VehicleState, road: RoadNetwork) -> ActionMask:
    limit = applicable_speed_limit(vehicle, road)
    banned = []
    for action in ActionId:
        if action == ActionId.HARD_BRAKE:
            continue
        v_next = speed_after(vehicle, action)
        if v_next is not None and v_next > limit + EPS:
            banned.append(action)
    return ActionMask.forbidding(banned)


def safety_mask(vehicle: VehicleState, world: WorldState, p: IdmParams = IdmParams()) -> ActionMask:
    leader = path_leader(world, vehicle)
    if leader is None:
        return ActionMask.all_permitted()
    gap = bumper_gap(vehicle, leader, world.road)
    if gap <= 0.0:
        return ActionMask.forbidding(a for a in ActionId if a != ActionId.HARD_BRAKE)
    params = p.for_speed_limit(applicable_speed_limit(vehicle, world.road))
    a_idm = idm_acceleration(vehicle.v, leader.v, gap, params)
    banned = []
    for action in ActionId:
        if action == ActionId.HARD_BRAKE:
            continue
        a_next = resulting_acceleration(vehicle.a, vehicle.post_brake, action)
        if a_next is not None and a_next > a_idm + SAFETY_TOLERANCE:
            banned.append(action)
    return ActionMask.forbidding(banned)


def combine_masks(mk: ActionMask, mr: ActionMask, ms: ActionMask) -> ActionMask:
    permitted = tuple(a and b and c for a, b, c in zip(mk.permitted, mr.permitted, ms.permitted))
    if not any(permitted):
        permitted = tuple(i == int(ActionId.HARD_BRAKE) for i in range(N_ACTIONS))
    return ActionMask(permitted)


def action_mask(world: WorldState, vehicle_id: int, p: IdmParams = IdmParams()) -> ActionMask:
    """Combined mask of one active vehicle."""
    vehicle = world.vehicle(vehicle_id)
    return combine_masks(kinematic_mask(vehicle), rule_mask(vehicle, world.road), safety_mask(vehicle, world, p))
