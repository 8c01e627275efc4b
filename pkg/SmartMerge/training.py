"""Actor-critic training: objectives, the combined update and the curriculum stages.

The policy is trained with a weighted sum of two policy-gradient objectives:
one baselined by a decentralized value network V(o, b) and one by the
counterfactual baseline of a centralized critic Q(s, a, b). Stage 1 trains
against rule-based robots with V only; stage 2 is self-play with both critics.
"""
from __future__ import annotations

import copy
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
import torch
from tqdm import tqdm

from .baselines import Controller, make_controller
from .checkpoint import Checkpoint, save_checkpoint
from .config import TrainConfig
from .errors import CheckpointError, MaskViolationError, NonFiniteError
from .masking import ActionMask
from .networks import (
    DTYPE,
    SPEED_SCALE,
    ACCEL_SCALE,
    DISTANCE_SCALE,
    TYPE_SCALE,
    CentralCritic,
    Gradients,
    IdasNetworks,
    NetworkArch,
    PolicyInput,
    PolicyNet,
    ValueNet,
    combine_gradients,
    counterfactual_values,
    encode_observations,
    gradients,
    masked_entropy,
    masked_log_softmax,
    optimize_step,
    policy_forward,
    soft_update,
)
from .observation import AgentObservation
from .rewards import discounted_return
from .rollout import EpisodeResult, PolicyController, run_episode, sample_actions
from .scenario import ScenarioRandomization, build_world, generate_scenario
from .simulator import ActionId, BehaviorParams, WorldState, path_coordinate

log = logging.getLogger(__name__)

STAGE_KEYS = {"stage1": 1, "stage2": 2, "direct": 3}


@dataclass
class AgentTransition:
    vehicle_id: int
    slot: int
    observation: AgentObservation
    behavior: BehaviorParams
    mask: ActionMask
    action: ActionId
    reward: float
    done: bool


@dataclass
class TransitionRecord:
    t: int
    agents: List[AgentTransition]
    global_state: np.ndarray
    behaviors: np.ndarray
    joint_action: np.ndarray
    joint_reward: float
    next_global_state: np.ndarray
    terminal: bool


def global_features(world: WorldState, slots: int) -> Tuple[np.ndarray, np.ndarray]:
    """Per-slot (lane, d, v, a) and (b_prio, b_type), scaled; absent slots are zero."""
    state = np.zeros((slots, 4))
    behaviors = np.zeros((slots, 2))
    for vehicle in world.vehicles:
        if not vehicle.active:
            continue
        if vehicle.id >= slots:
            raise ValueError(f"vehicle {vehicle.id} does not fit the critic's {slots} slots")
        state[vehicle.id] = (
            vehicle.lane,
            path_coordinate(vehicle, world.road) / DISTANCE_SCALE,
            vehicle.v / SPEED_SCALE,
            vehicle.a / ACCEL_SCALE,
        )
        behaviors[vehicle.id] = (vehicle.behavior.b_prio, vehicle.behavior.b_type / TYPE_SCALE)
    return state, behaviors


def records_from_episode(result: EpisodeResult, slots: int) -> List[TransitionRecord]:
    records: List[TransitionRecord] = []
    last = len(result.steps) - 1
    for k, step in enumerate(result.steps):
        state, behaviors = global_features(step.world, slots)
        next_state, _ = global_features(step.next_world, slots)
        joint = np.full(slots, -1, dtype=np.int64)
        agents: List[AgentTransition] = []
        for vid, decision in sorted(step.decisions.items()):
            joint[vid] = int(decision.action)
            if decision.observation is None:
                continue
            vehicle = step.world.vehicles[vid]
            agents.append(AgentTransition(
                vehicle_id=vid,
                slot=vid,
                observation=decision.observation,
                behavior=vehicle.behavior,
                mask=step.masks[vid],
                action=decision.action,
                reward=step.rewards.per_agent.get(vid, 0.0),
                done=step.next_world.vehicles[vid].done or k == last,
            ))
        records.append(TransitionRecord(
            t=step.world.t,
            agents=agents,
            global_state=state,
            behaviors=behaviors,
            joint_action=joint,
            joint_reward=step.rewards.joint,
            next_global_state=next_state,
            terminal=k == last,
        ))
    return records


def rollout_episode(world: WorldState, controllers: Dict[int, Controller], max_steps: int = 600,
                    slots: int = 8) -> List[TransitionRecord]:
    """Full on-policy trajectory of one episode."""
    return records_from_episode(run_episode(world, controllers, max_steps), slots)


@dataclass
class EpisodeBatch:
    """Tensors of one episode: agent rows for the policy/V, step rows for Q."""

    inputs: PolicyInput
    masks: torch.Tensor
    actions: torch.Tensor
    rewards: torch.Tensor
    done: torch.Tensor
    next_row: torch.Tensor
    step_index: torch.Tensor
    slot: torch.Tensor
    state: torch.Tensor
    behaviors: torch.Tensor
    joint_action: torch.Tensor
    joint_reward: torch.Tensor
    terminal: torch.Tensor

    def __len__(self) -> int:
        return int(self.actions.shape[0])

    @property
    def n_steps(self) -> int:
        return int(self.state.shape[0])

    @classmethod
    def from_records(cls, records: List[TransitionRecord], arch: NetworkArch = NetworkArch()) -> "EpisodeBatch":
        rows: List[AgentTransition] = []
        step_index: List[int] = []
        where: Dict[Tuple[int, int], int] = {}
        for k, record in enumerate(records):
            for agent in record.agents:
                if not agent.mask.is_permitted(agent.action):
                    raise MaskViolationError(
                        f"recorded action {agent.action.name} of vehicle {agent.vehicle_id} at step {record.t} "
                        f"is outside its mask {agent.mask}"
                    )
                where[(k, agent.vehicle_id)] = len(rows)
                rows.append(agent)
                step_index.append(k)

        next_row = [
            -1 if agent.done else where.get((k + 1, agent.vehicle_id), -1)
            for agent, k in zip(rows, step_index)
        ]
        done = [agent.done or nxt < 0 for agent, nxt in zip(rows, next_row)]
        as_float = lambda x: torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=DTYPE)
        as_long = lambda x: torch.as_tensor(np.asarray(x, dtype=np.int64))
        return cls(
            inputs=encode_observations([agent.observation for agent in rows], arch),
            masks=torch.as_tensor(np.array([a.mask.as_array() for a in rows], dtype=bool).reshape(-1, arch.n_actions)),
            actions=as_long([int(a.action) for a in rows]),
            rewards=as_float([a.reward for a in rows]),
            done=as_float(done),
            next_row=as_long(next_row),
            step_index=as_long(step_index),
            slot=as_long([a.slot for a in rows]),
            state=as_float(np.array([r.global_state for r in records]).reshape(-1, arch.q_slots, 4)),
            behaviors=as_float(np.array([r.behaviors for r in records]).reshape(-1, arch.q_slots, 2)),
            joint_action=as_long(np.array([r.joint_action for r in records]).reshape(-1, arch.q_slots)),
            joint_reward=as_float([r.joint_reward for r in records]),
            terminal=as_float([r.terminal for r in records]),
        )


# --- objectives ---------------------------------------------------------------

def advantage_decentralized(reward, v_now, v_next, done, gamma: float):
    """TD error r + γ V(o') − V(o), with V(o') = 0 on terminal steps."""
    return reward + gamma * (1.0 - done) * v_next - v_now


def _next_values(values: torch.Tensor, next_row: torch.Tensor) -> torch.Tensor:
    gathered = values[next_row.clamp(min=0)]
    return torch.where(next_row >= 0, gathered, torch.zeros_like(gathered))


def decentralized_advantages(batch: EpisodeBatch, value: ValueNet, gamma: float) -> torch.Tensor:
    with torch.no_grad():
        values = value(batch.inputs)
        return advantage_decentralized(batch.rewards, values, _next_values(values, batch.next_row), batch.done, gamma)


def counterfactual_baseline(q: CentralCritic, global_state: torch.Tensor, joint_action: torch.Tensor,
                            behaviors: torch.Tensor, slot: int, probabilities: torch.Tensor) -> torch.Tensor:
    """Expected Q over one agent's permitted actions with the others' actions fixed."""
    values = counterfactual_values(q, global_state[None], joint_action[None], behaviors[None],
                                   torch.tensor([slot]))[0]
    weighted = torch.where(probabilities > 0, probabilities * values, torch.zeros_like(values))
    return weighted.sum()


def counterfactual_advantages(batch: EpisodeBatch, policy: PolicyNet, q: CentralCritic) -> torch.Tensor:
    with torch.no_grad():
        probabilities = policy_forward(policy, batch.inputs, batch.masks)
        k = batch.step_index
        values = counterfactual_values(q, batch.state[k], batch.joint_action[k], batch.behaviors[k], batch.slot)
        taken = values.gather(1, batch.actions[:, None]).squeeze(1)
        baseline = torch.where(probabilities > 0, probabilities * values, torch.zeros_like(values)).sum(dim=1)
        return taken - baseline


def policy_surrogate(batch: EpisodeBatch, policy: PolicyNet, advantages: torch.Tensor,
                     entropy_coef: float = 0.0) -> torch.Tensor:
    """Σ log π(a|o,b)·A + entropy_coef·Σ H(π(·|o,b)); its gradient is the policy gradient."""
    logits = policy(batch.inputs)
    log_probs = masked_log_softmax(logits, batch.masks).gather(1, batch.actions[:, None]).squeeze(1)
    surrogate = (log_probs * advantages.detach()).sum()
    if entropy_coef:
        surrogate = surrogate + entropy_coef * masked_entropy(logits, batch.masks).sum()
    return surrogate


def grad_J1(batch: EpisodeBatch, policy: PolicyNet, value: ValueNet, gamma: float,
            entropy_coef: float = 0.0) -> Gradients:
    advantages = decentralized_advantages(batch, value, gamma)
    return gradients(policy_surrogate(batch, policy, advantages, entropy_coef), policy)


def grad_J2(batch: EpisodeBatch, policy: PolicyNet, q: CentralCritic, entropy_coef: float = 0.0) -> Gradients:
    advantages = counterfactual_advantages(batch, policy, q)
    return gradients(policy_surrogate(batch, policy, advantages, entropy_coef), policy)


def loss_V(batch: EpisodeBatch, value: ValueNet, value_target: ValueNet, gamma: float) -> torch.Tensor:
    with torch.no_grad():
        bootstrap = _next_values(value_target(batch.inputs), batch.next_row)
        target = batch.rewards + gamma * (1.0 - batch.done) * bootstrap
    return 0.5 * ((target - value(batch.inputs)) ** 2).sum()


def target_joint_actions(batch: EpisodeBatch, policy_target: PolicyNet, rng: np.random.Generator) -> torch.Tensor:
    """Joint action at s' for every step, learning agents' actions drawn from the target policy."""
    with torch.no_grad():
        probabilities = policy_forward(policy_target, batch.inputs, batch.masks).numpy()
    sampled = torch.as_tensor(sample_actions(probabilities, rng))
    next_joint = torch.roll(batch.joint_action, shifts=-1, dims=0).clone()
    later = batch.step_index > 0
    next_joint[batch.step_index[later] - 1, batch.slot[later]] = sampled[later]
    return next_joint


def loss_Q(batch: EpisodeBatch, q: CentralCritic, q_target: CentralCritic, policy_target: PolicyNet,
           gamma: float, rng: np.random.Generator) -> torch.Tensor:
    with torch.no_grad():
        next_joint = target_joint_actions(batch, policy_target, rng)
        next_state = torch.roll(batch.state, shifts=-1, dims=0)
        next_behaviors = torch.roll(batch.behaviors, shifts=-1, dims=0)
        bootstrap = q_target(next_state, next_joint, next_behaviors)
        target = batch.joint_reward + gamma * (1.0 - batch.terminal) * bootstrap
    return 0.5 * ((target - q(batch.state, batch.joint_action, batch.behaviors)) ** 2).sum()


@dataclass
class UpdateStats:
    loss_v: float
    loss_q: float
    entropy: float


def _finite(name: str, value: torch.Tensor) -> float:
    number = float(value.detach())
    if not math.isfinite(number):
        raise NonFiniteError(f"{name} is not finite ({number})")
    return number


def combined_update(batch: EpisodeBatch, nets: IdasNetworks, config: TrainConfig,
                    rng: np.random.Generator, alpha: Optional[float] = None) -> UpdateStats:
    """One update: π ascends α∇J1 + (1−α)∇J2, V and Q descend their TD losses, targets track softly.

    Without a centralized critic α is 1.
    """
    alpha = config.alpha if alpha is None else alpha
    if not nets.has_q:
        alpha = 1.0

    with torch.no_grad():
        entropy = masked_entropy(nets.policy(batch.inputs), batch.masks).mean()
    parts = []
    if alpha > 0.0:
        parts.append((alpha, grad_J1(batch, nets.policy, nets.value, config.gamma, config.entropy_coef)))
    if alpha < 1.0:
        parts.append((1.0 - alpha, grad_J2(batch, nets.policy, nets.q, config.entropy_coef)))
    ascent = combine_gradients(parts)

    lv = loss_V(batch, nets.value, nets.value_target, config.gamma)
    stats = UpdateStats(loss_v=_finite("value loss", lv), loss_q=float("nan"), entropy=_finite("entropy", entropy))
    grad_v = gradients(lv, nets.value)
    grad_q = None
    if nets.has_q:
        lq = loss_Q(batch, nets.q, nets.q_target, nets.policy_target, config.gamma, rng)
        stats.loss_q = _finite("critic loss", lq)
        grad_q = gradients(lq, nets.q)

    optimize_step(nets.policy, {name: -g for name, g in ascent.items()}, nets.optimizers["policy"])
    optimize_step(nets.value, grad_v, nets.optimizers["value"])
    soft_update(nets.value_target, nets.value, config.tau)
    if nets.has_q:
        optimize_step(nets.q, grad_q, nets.optimizers["q"])
        soft_update(nets.q_target, nets.q, config.tau)
        soft_update(nets.policy_target, nets.policy, config.tau)
    return stats


# --- curriculum -----------------------------------------------------------------

@dataclass
class _Episode:
    episode: int
    records: List[TransitionRecord]
    result: EpisodeResult
    learners: List[int]
    target_rng: np.random.Generator


def episode_seeds(seed: int, stage: str, episode: int) -> Tuple[int, np.random.Generator, np.random.Generator]:
    """Scenario seed, policy sampling generator and target sampling generator of one episode."""
    sequence = np.random.SeedSequence([int(seed), STAGE_KEYS[stage], int(episode)])
    scenario_seq, policy_seq, target_seq = sequence.spawn(3)
    return (int(scenario_seq.generate_state(1, dtype=np.uint64)[0]),
            np.random.default_rng(policy_seq), np.random.default_rng(target_seq))


def _collect(episode: int, stage: str, policy: PolicyNet, config: TrainConfig,
             scenarios: ScenarioRandomization) -> _Episode:
    scenario_seed, policy_rng, target_rng = episode_seeds(config.seed, stage, episode)
    spec = generate_scenario(scenario_seed, scenarios)
    world = build_world(spec)
    learner = PolicyController(policy, policy_rng)
    controllers: Dict[int, Controller] = {}
    for vehicle in world.vehicles:
        if vehicle.controller == "policy":
            controllers[vehicle.id] = learner
        else:
            controllers[vehicle.id] = make_controller(vehicle.controller, policy_rng)
    result = run_episode(world, controllers, config.max_steps)
    learners = [v.id for v in world.vehicles if v.controller == "policy"]
    return _Episode(episode, records_from_episode(result, config.network.q_slots), result, learners, target_rng)


def _summary(item: _Episode, stage: str, gamma: float, stats: Optional[UpdateStats]) -> Dict:
    final = item.result.final_world
    returns = [discounted_return(item.result.rewards_of(vid), gamma) for vid in item.learners]
    penalised = any(
        value < 0 for step in item.result.steps for parts in step.rewards.components.values() for _, value in parts
    )
    return {
        "episode": item.episode,
        "stage": stage,
        "agents": len(item.learners),
        "steps": len(item.result.steps),
        "terminated_by": item.result.terminated_by,
        "mean_return": float(np.mean(returns)) if returns else float("nan"),
        "returns": ";".join(f"{r:.6f}" for r in returns),
        "success": all(final.vehicles[vid].finished for vid in item.learners),
        "perfect": all(v.finished for v in final.vehicles) and not penalised,
        "loss_v": stats.loss_v if stats else float("nan"),
        "loss_q": stats.loss_q if stats else float("nan"),
        "entropy": stats.entropy if stats else float("nan"),
    }


def _train_loop(nets: IdasNetworks, config: TrainConfig, stage: str, total: int,
                scenarios: ScenarioRandomization, alpha: float, start: int = 0, step: int = 0,
                out_dir: Optional[Path] = None, progress: bool = False) -> Checkpoint:
    log_path = out_dir / f"training_log_{stage}.csv" if out_dir is not None else None
    rows: List[Dict] = []
    if log_path is not None and start > 0 and log_path.exists():
        previous = pd.read_csv(log_path, keep_default_na=False, dtype={"returns": str})
        rows = previous[previous["episode"] < start].to_dict("records")

    def flush() -> None:
        if log_path is not None:
            pd.DataFrame(rows).to_csv(log_path, index=False)

    def consume(item: _Episode) -> None:
        nonlocal step
        batch = EpisodeBatch.from_records(item.records, config.network)
        stats = None
        if len(batch) > 0:
            try:
                stats = combined_update(batch, nets, config, item.target_rng, alpha)
            except NonFiniteError:
                if out_dir is not None:
                    save_checkpoint(nets.to_checkpoint(stage, step, item.episode),
                                    out_dir / f"{stage}_nonfinite_ep{item.episode:06d}.ckpt")
                raise
            step += 1
        rows.append(_summary(item, stage, config.gamma, stats))
        done = item.episode + 1
        if done % config.log_every == 0:
            recent = pd.DataFrame(rows[-config.log_every:])
            log.info("%s episode %d: mean return %.3f, success %.1f%%, loss_v %.4g, loss_q %.4g",
                     stage, done, recent["mean_return"].mean(), 100.0 * recent["success"].mean(),
                     recent["loss_v"].mean(), recent["loss_q"].mean())
        if out_dir is not None and done % config.checkpoint_every == 0 and done < total:
            save_checkpoint(nets.to_checkpoint(stage, step, done), out_dir / f"{stage}_ep{done:06d}.ckpt")
            flush()

    episodes = range(start, total)
    bar = tqdm(total=len(episodes), desc=stage, disable=not progress)
    if config.workers == 1:
        for episode in episodes:
            consume(_collect(episode, stage, nets.policy, config, scenarios))
            bar.update()
    else:
        # rollouts of one chunk share a policy snapshot; updates are applied in episode order
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            for chunk_start in range(start, total, config.workers):
                snapshot = copy.deepcopy(nets.policy)
                futures = [
                    pool.submit(_collect, episode, stage, snapshot, config, scenarios)
                    for episode in range(chunk_start, min(total, chunk_start + config.workers))
                ]
                for future in futures:
                    consume(future.result())
                    bar.update()
    bar.close()

    checkpoint = nets.to_checkpoint(stage, step, max(total, start))
    if out_dir is not None:
        save_checkpoint(checkpoint, out_dir / f"{stage}.ckpt")
        flush()
    return checkpoint


def _networks(config: TrainConfig, with_q: bool) -> IdasNetworks:
    return IdasNetworks.fresh(config.network, config.seed, with_q=with_q, lr_policy=config.lr_policy,
                              lr_critic=config.lr_critic, optimizer=config.optimizer)


def _restore(checkpoint: Checkpoint, config: TrainConfig) -> IdasNetworks:
    return IdasNetworks.from_checkpoint(checkpoint, lr_policy=config.lr_policy,
                                        lr_critic=config.lr_critic, optimizer=config.optimizer)


def _prepare(out_dir: Union[str, Path, None]) -> Optional[Path]:
    if out_dir is None:
        return None
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


def train_stage1(config: TrainConfig, out_dir: Union[str, Path, None] = None,
                 resume: Optional[Checkpoint] = None, progress: bool = False) -> Checkpoint:
    """Robot world: one learning agent among rule-based robots, policy and V only."""
    config.validate()
    if resume is not None:
        if resume.stage != "stage1":
            raise CheckpointError(f"cannot resume stage 1 from a '{resume.stage}' checkpoint")
        nets, start, step = _restore(resume, config), resume.episodes, resume.step
    else:
        nets, start, step = _networks(config, with_q=False), 0, 0
    log.info("stage 1: episodes %d to %d", start, config.stage1_episodes)
    return _train_loop(nets, config, "stage1", config.stage1_episodes, config.stage1_scenarios,
                       alpha=1.0, start=start, step=step, out_dir=_prepare(out_dir), progress=progress)


def train_stage2(checkpoint: Checkpoint, config: TrainConfig, out_dir: Union[str, Path, None] = None,
                 progress: bool = False) -> Checkpoint:
    """Intelligent world: self-play of the stage 1 policy with a fresh centralized critic."""
    config.validate()
    if checkpoint.stage == "stage1":
        nets, start, step = _restore(checkpoint, config), 0, 0
        q_seed = int(np.random.SeedSequence([config.seed, STAGE_KEYS["stage2"]]).generate_state(1)[0])
        nets.add_centralized_critic(q_seed)
    elif checkpoint.stage == "stage2":
        nets, start, step = _restore(checkpoint, config), checkpoint.episodes, checkpoint.step
    else:
        raise CheckpointError(f"stage 2 starts from a stage1 checkpoint, got '{checkpoint.stage}'")
    log.info("stage 2: episodes %d to %d", start, config.stage2_episodes)
    return _train_loop(nets, config, "stage2", config.stage2_episodes, config.stage2_scenarios,
                       alpha=config.alpha, start=start, step=step, out_dir=_prepare(out_dir), progress=progress)


def train_direct(config: TrainConfig, out_dir: Union[str, Path, None] = None,
                 resume: Optional[Checkpoint] = None, progress: bool = False) -> Checkpoint:
    """Combined objective from scratch in the intelligent world, without the robot world stage."""
    config.validate()
    if resume is not None:
        if resume.stage != "direct":
            raise CheckpointError(f"cannot resume direct training from a '{resume.stage}' checkpoint")
        nets, start, step = _restore(resume, config), resume.episodes, resume.step
    else:
        nets, start, step = _networks(config, with_q=True), 0, 0
    log.info("direct: episodes %d to %d", start, config.direct_episodes)
    return _train_loop(nets, config, "direct", config.direct_episodes, config.stage2_scenarios,
                       alpha=config.alpha, start=start, step=step, out_dir=_prepare(out_dir), progress=progress)
