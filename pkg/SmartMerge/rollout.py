"""Episode runner shared by training and evaluation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np
import torch

from .baselines import Controller, Decision
from .errors import MaskViolationError
from .masking import ActionMask, IdmParams, action_mask
from .networks import NetworkArch, PolicyNet, encode_observations, policy_forward
from .observation import build_observation
from .rewards import RewardBreakdown, cause_of_hard_brake, step_rewards
from .simulator import ActionId, StepEvents, WorldState, step_world

log = logging.getLogger(__name__)

MAX_STEPS = 600


def sample_actions(probabilities: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One categorical draw per row by inverse CDF; zero-probability entries are never drawn."""
    cumulative = np.cumsum(probabilities, axis=1)
    threshold = rng.random(probabilities.shape[0]) * cumulative[:, -1]
    return (cumulative <= threshold[:, None]).sum(axis=1)


class PolicyController(Controller):
    """Samples from the masked policy for every vehicle it drives, in one batch."""

    name = "policy"
    learning = True

    def __init__(self, policy: PolicyNet, rng: np.random.Generator, greedy: bool = False,
                 idm: IdmParams = IdmParams()):
        super().__init__(idm)
        self.policy = policy
        self.arch: NetworkArch = policy.arch
        self.rng = rng
        self.greedy = greedy

    def decide(self, world: WorldState, vehicle_ids: Sequence[int],
               masks: Mapping[int, ActionMask]) -> Dict[int, Decision]:
        if not vehicle_ids:
            return {}
        observations = [build_observation(world, vid) for vid in vehicle_ids]
        mask = torch.as_tensor(np.stack([masks[vid].as_array() for vid in vehicle_ids]))
        with torch.no_grad():
            probabilities = policy_forward(self.policy, encode_observations(observations, self.arch), mask).numpy()
        if self.greedy:
            chosen = probabilities.argmax(axis=1)
        else:
            chosen = sample_actions(probabilities, self.rng)
        return {
            vid: Decision(ActionId(int(action)), obs, probs)
            for vid, action, obs, probs in zip(vehicle_ids, chosen, observations, probabilities)
        }

    def action(self, world, vehicle_id, mask):
        return self.decide(world, [vehicle_id], {vehicle_id: mask})[vehicle_id].action


@dataclass
class StepResult:
    world: WorldState
    masks: Dict[int, ActionMask]
    decisions: Dict[int, Decision]
    events: StepEvents
    rewards: RewardBreakdown
    next_world: WorldState
    attribution: Dict[int, Optional[int]] = field(default_factory=dict)


@dataclass
class EpisodeResult:
    steps: List[StepResult]
    final_world: WorldState
    terminated_by: str

    def rewards_of(self, vehicle_id: int) -> List[float]:
        """Per-step rewards of a vehicle from its first decision on."""
        rewards: List[float] = []
        for step in self.steps:
            if vehicle_id in step.decisions:
                rewards.append(step.rewards.per_agent.get(vehicle_id, 0.0))
        return rewards


def _grouped(controllers: Mapping[int, Controller], active: Iterable[int]) -> List[tuple]:
    groups: Dict[int, tuple] = {}
    for vid in active:
        controller = controllers[vid]
        groups.setdefault(id(controller), (controller, []))[1].append(vid)
    return list(groups.values())


def run_episode(world: WorldState, controllers: Mapping[int, Controller], max_steps: int = MAX_STEPS,
                watch: Optional[Iterable[int]] = None, idm: IdmParams = IdmParams()) -> EpisodeResult:
    """Step ``world`` until every vehicle is done, a watched vehicle collides, or the cap.

    Parameters
    ----------
    world : WorldState
        Initial world.
    controllers : Mapping[int, Controller]
        Driver of every vehicle id; vehicles sharing a controller are decided in one batch.
    max_steps : int
        Step cap.
    watch : iterable of int, optional
        Vehicles whose collision ends the episode; defaults to the learning-driven ones.
    """
    missing = [v.id for v in world.vehicles if v.id not in controllers]
    if missing:
        raise KeyError(f"no controller given for vehicles {missing}")
    watched = set(watch) if watch is not None else {vid for vid, c in controllers.items() if c.learning}

    steps: List[StepResult] = []
    terminated_by = "step_cap"
    for _ in range(max_steps):
        if world.all_done():
            terminated_by = "finished"
            break
        active = [v.id for v in world.vehicles if v.active]
        masks = {vid: action_mask(world, vid, idm) for vid in active}
        decisions: Dict[int, Decision] = {}
        for controller, vids in _grouped(controllers, active):
            decisions.update(controller.decide(world, vids, masks))
        for vid, decision in decisions.items():
            if not masks[vid].is_permitted(decision.action):
                raise MaskViolationError(
                    f"vehicle {vid} chose {decision.action.name} at step {world.t}, mask {masks[vid]}"
                )

        next_world, events = step_world(world, {vid: d.action for vid, d in decisions.items()})
        attribution = {vid: cause_of_hard_brake(world, vid) for vid in events.hard_brakes}
        rewards = step_rewards(next_world, events, attribution)
        steps.append(StepResult(world, masks, decisions, events, rewards, next_world, attribution))
        world = next_world
        if watched.intersection(events.collided_ids):
            terminated_by = "collision"
            break
    else:
        if world.all_done():
            terminated_by = "finished"
    log.debug("episode ended by %s after %d steps", terminated_by, len(steps))
    return EpisodeResult(steps=steps, final_world=world, terminated_by=terminated_by)
