"""Per-agent and joint rewards computed from step events."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Tuple

from .simulator import (
    StepEvents,
    WorldState,
    path_coordinate,
    path_leader,
    share_path,
)

R_IMPEDE = -5.0
R_FLOW = -1.0
MAX_FINISH_REWARD = 20.0
CAUSE_RADIUS_M = 30.0
CROSS_LANE_WINDOW_M = 10.0


def finish_reward(b_type: float) -> float:
    if not -2.0 <= b_type <= 2.0:
        raise ValueError(f"b_type must lie in [-2, 2], got {b_type}")
    return (15.0 * b_type + 50.0) / 4.0


def collide_reward(b_prio: int) -> float:
    if b_prio not in (0, 1):
        raise ValueError(f"b_prio must be 0 or 1, got {b_prio}")
    return -5.0 * b_prio - 5.0


@dataclass(frozen=True)
class RewardBreakdown:
    per_agent: Dict[int, float] = field(default_factory=dict)
    joint: float = 0.0
    components: Dict[int, Tuple[Tuple[str, float], ...]] = field(default_factory=dict)
    flow_events: int = 0

    def component(self, vehicle_id: int, tag: str) -> float:
        return sum(value for name, value in self.components.get(vehicle_id, ()) if name == tag)


def cause_of_hard_brake(world: WorldState, braking_id: int) -> Optional[int]:
    """Vehicle blamed for a hard brake, judged on the world the brake was issued in.

    Candidates are the path leader and any other-lane vehicle within 10 m of
    merge-distance; the nearer one is blamed when it is within 30 m.
    """
    road = world.road
    braker = world.vehicle(braking_id)
    d_self = path_coordinate(braker, road)
    candidates: List[Tuple[float, int]] = []

    leader = path_leader(world, braker)
    if leader is not None:
        candidates.append((path_coordinate(leader, road) - d_self, leader.id))
    for other in world.vehicles:
        if other.id == braking_id or not other.active or share_path(braker, other, road):
            continue
        separation = abs(path_coordinate(other, road) - d_self)
        if separation <= CROSS_LANE_WINDOW_M:
            candidates.append((separation, other.id))

    if not candidates:
        return None
    separation, culprit = min(candidates)
    return culprit if separation <= CAUSE_RADIUS_M else None


def step_rewards(world: WorldState, events: StepEvents,
                 attribution: Mapping[int, Optional[int]]) -> RewardBreakdown:
    """Rewards of one step; ``world`` is the post-step world."""
    components: Dict[int, List[Tuple[str, float]]] = {}
    for vehicle in world.vehicles:
        if vehicle.active:
            components[vehicle.id] = []

    for vid in events.finishes:
        components.setdefault(vid, []).append(("finish", finish_reward(world.vehicles[vid].behavior.b_type)))
    for pair in events.collisions:
        for vid in pair:
            components.setdefault(vid, []).append(("collide", collide_reward(world.vehicles[vid].behavior.b_prio)))
    for braker in events.hard_brakes:
        causer = attribution.get(braker)
        if causer is not None and causer != braker:
            components.setdefault(causer, []).append(("impede", R_IMPEDE))
    for braker in events.hard_brakes:
        components.setdefault(braker, [])

    per_agent = {vid: math.fsum(value for _, value in parts) for vid, parts in sorted(components.items())}
    flow_events = len(events.hard_brakes_in_zone)
    joint = math.fsum(per_agent.values()) + R_FLOW * flow_events
    return RewardBreakdown(
        per_agent=per_agent,
        joint=joint,
        components={vid: tuple(parts) for vid, parts in sorted(components.items())},
        flow_events=flow_events,
    )


def discounted_return(rewards, gamma: float) -> float:
    """Sum of ``gamma**t * r_t`` from the first reward on."""
    total = 0.0
    for reward in reversed(list(rewards)):
        total = reward + gamma * total
    return total
