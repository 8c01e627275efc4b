"""Trajectory logs: one row per (step, vehicle) of an episode, as a pandas frame."""
from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Mapping, Optional, Union

import pandas as pd

from .rollout import EpisodeResult
from .simulator import path_coordinate

TRAJECTORY_COLUMNS = [
    "t", "time_s", "vehicle_id", "lane", "s", "d", "v", "a", "action", "mask",
    "b_prio", "b_type", "controller", "role", "events",
    "r_finish", "r_collide", "r_impede", "reward", "entry_time_s",
]


def _event_tags(result_step, vid: int) -> str:
    events = result_step.events
    tags = []
    if vid in events.hard_brakes:
        tags.append("hard_brake")
    if vid in events.hard_brakes_in_zone:
        tags.append("hard_brake_in_zone")
    if vid in events.finishes:
        tags.append("finish")
    if vid in events.collided_ids:
        tags.append("collision")
    return "|".join(tags)


def trajectory_frame(result: EpisodeResult, roles: Optional[Mapping[int, str]] = None) -> pd.DataFrame:
    """Pre-step state, chosen action, mask, events and rewards of every acting vehicle."""
    roles = roles or {}
    rows: List[Dict] = []
    for step in result.steps:
        world, road = step.world, step.world.road
        for vid in sorted(step.decisions):
            vehicle = world.vehicles[vid]
            rewards = step.rewards
            rows.append({
                "t": world.t,
                "time_s": round(world.time_s, 10),
                "vehicle_id": vid,
                "lane": vehicle.lane,
                "s": vehicle.s,
                "d": path_coordinate(vehicle, road),
                "v": vehicle.v,
                "a": vehicle.a,
                "action": step.decisions[vid].action.name.lower(),
                "mask": str(step.masks[vid]),
                "b_prio": vehicle.behavior.b_prio,
                "b_type": vehicle.behavior.b_type,
                "controller": vehicle.controller,
                "role": roles.get(vid, ""),
                "events": _event_tags(step, vid),
                "r_finish": rewards.component(vid, "finish"),
                "r_collide": rewards.component(vid, "collide"),
                "r_impede": rewards.component(vid, "impede"),
                "reward": rewards.per_agent.get(vid, 0.0),
                "entry_time_s": round(vehicle.entered_step * world.dt, 10),
            })
    return pd.DataFrame(rows, columns=TRAJECTORY_COLUMNS)


def write_trajectory(frame: pd.DataFrame, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False)
    return path


def read_trajectory(path: Union[str, Path]) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise IOError(f"path: {path} does not exist, please provide correct path")
    return pd.read_csv(path, keep_default_na=False,
                       dtype={"events": str, "role": str, "mask": str})
