"""Policy, value and centralized critic networks (torch, float64).

The policy and value networks share one architecture: three small dense
branches for priority, driver type and local state, a 2-filter convolution
over the stacked lane grids, and a dense trunk. The centralized critic reads
every slot's state, behaviour and action.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, fields
from typing import Dict, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import Checkpoint
from .errors import CheckpointError, MaskViolationError, NonFiniteError
from .observation import GRID_CELLS, AgentObservation
from .simulator import MERGE_POINT, N_ACTIONS

log = logging.getLogger(__name__)

DTYPE = torch.float64

SPEED_SCALE = 20.0
ACCEL_SCALE = 4.0
DISTANCE_SCALE = MERGE_POINT
TYPE_SCALE = 2.0

Gradients = Dict[str, torch.Tensor]


@dataclass(frozen=True)
class NetworkArch:
    grid_cells: int = GRID_CELLS
    branch_units: int = 32
    conv_filters: int = 2
    kernel_rows: int = 3
    kernel_cols: int = 30
    trunk_units: int = 64
    q_slots: int = 8
    q_hidden: int = 128
    n_actions: int = N_ACTIONS

    def __post_init__(self) -> None:
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise ValueError(f"network size {f.name} must be positive, got {getattr(self, f.name)}")
        if self.kernel_rows > 4 or self.kernel_cols > self.grid_cells:
            raise ValueError(f"kernel {self.kernel_rows}x{self.kernel_cols} does not fit a 4x{self.grid_cells} grid")

    @property
    def conv_features(self) -> int:
        return self.conv_filters * (4 - self.kernel_rows + 1) * (self.grid_cells - self.kernel_cols + 1)

    @property
    def slot_features(self) -> int:
        return 4 + 2 + self.n_actions

    def to_vector(self) -> np.ndarray:
        return np.array([getattr(self, f.name) for f in fields(self)], dtype=np.float64)

    @classmethod
    def from_vector(cls, vector: np.ndarray) -> "NetworkArch":
        names = [f.name for f in fields(cls)]
        if vector.shape != (len(names),):
            raise CheckpointError(f"block 'meta.arch' has shape {vector.shape}, expected ({len(names)},)")
        return cls(**{name: int(value) for name, value in zip(names, vector)})


@dataclass
class PolicyInput:
    """Batched, normalized policy/value network input."""

    priority: torch.Tensor
    driver_type: torch.Tensor
    local: torch.Tensor
    grid: torch.Tensor

    def __len__(self) -> int:
        return self.priority.shape[0]

    def rows(self, index: torch.Tensor) -> "PolicyInput":
        return PolicyInput(self.priority[index], self.driver_type[index], self.local[index], self.grid[index])


def encode_observations(observations: Sequence[AgentObservation], arch: NetworkArch = NetworkArch()) -> PolicyInput:
    if arch.grid_cells != GRID_CELLS:
        raise ValueError(f"observations carry {GRID_CELLS} cells, network expects {arch.grid_cells}")
    n = len(observations)
    priority = np.zeros((n, 1))
    driver_type = np.zeros((n, 1))
    local = np.zeros((n, 4))
    grid = np.zeros((n, 1, 4, GRID_CELLS))
    for i, obs in enumerate(observations):
        priority[i, 0] = obs.priority
        driver_type[i, 0] = obs.driver_type / TYPE_SCALE
        local[i] = (obs.v / SPEED_SCALE, obs.a / ACCEL_SCALE, obs.dist_to_merge / DISTANCE_SCALE, float(obs.post_brake))
        image = obs.image()
        grid[i, 0, 0::2] = image[0::2]
        grid[i, 0, 1::2] = image[1::2] / SPEED_SCALE
    as_tensor = lambda x: torch.as_tensor(x, dtype=DTYPE)
    return PolicyInput(as_tensor(priority), as_tensor(driver_type), as_tensor(local), as_tensor(grid))


class BranchNet(nn.Module):
    def __init__(self, arch: NetworkArch, out_features: int):
        super().__init__()
        self.arch = arch
        units = arch.branch_units
        self.fc1 = nn.Linear(1, units, dtype=DTYPE)
        self.fc2 = nn.Linear(1, units, dtype=DTYPE)
        self.fc3 = nn.Linear(4, units, dtype=DTYPE)
        self.conv = nn.Conv2d(1, arch.conv_filters, (arch.kernel_rows, arch.kernel_cols), stride=1, dtype=DTYPE)
        self.fc4 = nn.Linear(3 * units + arch.conv_features, arch.trunk_units, dtype=DTYPE)
        self.fc5 = nn.Linear(arch.trunk_units, arch.trunk_units, dtype=DTYPE)
        self.fc6 = nn.Linear(arch.trunk_units, arch.trunk_units, dtype=DTYPE)
        self.head = nn.Linear(arch.trunk_units, out_features, dtype=DTYPE)

    def forward(self, inputs: PolicyInput) -> torch.Tensor:
        if inputs.grid.shape[1:] != (1, 4, self.arch.grid_cells):
            raise ValueError(
                f"grid input has shape {tuple(inputs.grid.shape)}, expected (B, 1, 4, {self.arch.grid_cells})"
            )
        x = torch.cat([
            F.relu(self.fc1(inputs.priority)),
            F.relu(self.fc2(inputs.driver_type)),
            F.relu(self.fc3(inputs.local)),
            F.relu(self.conv(inputs.grid)).flatten(start_dim=1),
        ], dim=1)
        x = F.relu(self.fc4(x))
        x = F.relu(self.fc5(x))
        x = F.relu(self.fc6(x))
        return self.head(x)


class PolicyNet(BranchNet):
    def __init__(self, arch: NetworkArch = NetworkArch()):
        super().__init__(arch, arch.n_actions)


class ValueNet(BranchNet):
    def __init__(self, arch: NetworkArch = NetworkArch()):
        super().__init__(arch, 1)

    def forward(self, inputs: PolicyInput) -> torch.Tensor:
        return super().forward(inputs).squeeze(-1)


class CentralCritic(nn.Module):
    """Q(s, a, b) over fixed agent slots; absent slots carry action -1 and zeros."""

    def __init__(self, arch: NetworkArch = NetworkArch()):
        super().__init__()
        self.arch = arch
        self.fc1 = nn.Linear(arch.q_slots * arch.slot_features, arch.q_hidden, dtype=DTYPE)
        self.fc2 = nn.Linear(arch.q_hidden, arch.q_hidden, dtype=DTYPE)
        self.head = nn.Linear(arch.q_hidden, 1, dtype=DTYPE)

    def forward(self, state: torch.Tensor, joint_action: torch.Tensor, behaviors: torch.Tensor) -> torch.Tensor:
        slots = self.arch.q_slots
        if state.shape[1:] != (slots, 4) or behaviors.shape[1:] != (slots, 2) or joint_action.shape[1:] != (slots,):
            raise ValueError(
                f"critic input shapes {tuple(state.shape)}, {tuple(joint_action.shape)}, {tuple(behaviors.shape)} "
                f"do not match {slots} slots"
            )
        present = (joint_action >= 0).unsqueeze(-1)
        one_hot = F.one_hot(joint_action.clamp(min=0).long(), self.arch.n_actions).to(DTYPE) * present
        x = torch.cat([state, behaviors, one_hot], dim=-1).flatten(start_dim=1)
        x = F.relu(self.fc1(x))
        x = F.relu(self.fc2(x))
        return self.head(x).squeeze(-1)


def init_weights(module: nn.Module, generator: torch.Generator) -> nn.Module:
    """Uniform ±sqrt(6 / (fan_in + fan_out)) weights, zero biases."""
    with torch.no_grad():
        for name, param in module.named_parameters():
            if param.dim() < 2:
                param.zero_()
                continue
            receptive = int(np.prod(param.shape[2:])) if param.dim() > 2 else 1
            fan_out, fan_in = param.shape[0] * receptive, param.shape[1] * receptive
            bound = float(np.sqrt(6.0 / (fan_in + fan_out)))
            param.copy_((torch.rand(param.shape, generator=generator, dtype=DTYPE) * 2.0 - 1.0) * bound)
    return module


def masked_logits(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    if not bool(mask.any(dim=-1).all()):
        raise MaskViolationError("a mask forbids every action, no distribution exists")
    return logits.masked_fill(~mask, float("-inf"))


def masked_softmax(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Softmax over permitted entries; forbidden entries are exactly 0."""
    return torch.softmax(masked_logits(logits, mask), dim=-1)


def masked_log_softmax(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Log-probabilities on permitted entries, 0 on forbidden ones."""
    logp = torch.log_softmax(masked_logits(logits, mask), dim=-1)
    return torch.where(mask, logp, torch.zeros_like(logp))


def masked_entropy(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    probs = masked_softmax(logits, mask)
    return -(probs * masked_log_softmax(logits, mask)).sum(dim=-1)


def policy_forward(policy: PolicyNet, inputs: PolicyInput, mask: torch.Tensor) -> torch.Tensor:
    return masked_softmax(policy(inputs), mask)


def v_forward(value: ValueNet, inputs: PolicyInput) -> torch.Tensor:
    return value(inputs)


def substitute_action(joint_action: torch.Tensor, slot: torch.Tensor, action: torch.Tensor) -> torch.Tensor:
    """Copy of ``joint_action`` with row i's ``slot[i]`` replaced by ``action[i]``."""
    swapped = joint_action.clone()
    swapped[torch.arange(joint_action.shape[0]), slot] = action.to(joint_action.dtype)
    return swapped


def q_forward(q: CentralCritic, state: torch.Tensor, joint_action: torch.Tensor, behaviors: torch.Tensor,
              slot: Optional[torch.Tensor] = None, action: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Critic value, optionally with one agent's action substituted per row."""
    if slot is not None:
        joint_action = substitute_action(joint_action, slot, action)
    return q(state, joint_action, behaviors)


def counterfactual_values(q: CentralCritic, state: torch.Tensor, joint_action: torch.Tensor,
                          behaviors: torch.Tensor, slot: torch.Tensor) -> torch.Tensor:
    """Q with row i's agent ``slot[i]`` substituted by every action, shape (B, n_actions)."""
    rows, n_actions = state.shape[0], q.arch.n_actions
    repeat = lambda x: x.repeat_interleave(n_actions, dim=0)
    candidates = torch.arange(n_actions).repeat(rows)
    values = q_forward(q, repeat(state), repeat(joint_action), repeat(behaviors), repeat(slot), candidates)
    return values.reshape(rows, n_actions)


def gradients(loss: torch.Tensor, module: nn.Module) -> Gradients:
    """d loss / d parameter for every parameter of ``module``; unused ones get zeros."""
    names, params = zip(*module.named_parameters())
    grads = torch.autograd.grad(loss, params, allow_unused=True, retain_graph=True)
    return {
        name: torch.zeros_like(param) if grad is None else grad
        for name, param, grad in zip(names, params, grads)
    }


def combine_gradients(weighted: Sequence[tuple]) -> Gradients:
    """Sum of ``weight * grads`` over ``(weight, grads)`` pairs."""
    total: Gradients = {}
    for weight, grads in weighted:
        for name, grad in grads.items():
            total[name] = total[name] + weight * grad if name in total else weight * grad
    return total


def soft_update(target: nn.Module, online: nn.Module, tau: float) -> None:
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    with torch.no_grad():
        for t_param, o_param in zip(target.parameters(), online.parameters()):
            t_param.mul_(1.0 - tau).add_(o_param, alpha=tau)


def make_optimizer(module: nn.Module, lr: float, kind: str = "adam") -> torch.optim.Optimizer:
    if kind == "adam":
        return torch.optim.Adam(module.parameters(), lr=lr)
    if kind == "sgd":
        return torch.optim.SGD(module.parameters(), lr=lr)
    raise ValueError(f"unknown optimizer '{kind}', expected 'adam' or 'sgd'")


def optimize_step(module: nn.Module, grads: Gradients, optimizer: torch.optim.Optimizer) -> None:
    """Apply ``grads`` (a descent direction) to ``module`` with ``optimizer``."""
    for name, param in module.named_parameters():
        grad = grads[name]
        if not bool(torch.isfinite(grad).all()):
            raise NonFiniteError(f"non-finite gradient for parameter '{name}' (max |g| = {grad.abs().max().item()})")
        param.grad = grad.detach().clone()
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)


def _frozen_copy(module: nn.Module) -> nn.Module:
    target = copy.deepcopy(module)
    for param in target.parameters():
        param.requires_grad_(False)
    return target


class IdasNetworks:
    """Every network of one training run plus the optimizers of the trained ones."""

    def __init__(self, arch: NetworkArch, policy: PolicyNet, value: ValueNet,
                 q: Optional[CentralCritic] = None, lr_policy: float = 1e-4,
                 lr_critic: float = 1e-3, optimizer: str = "adam"):
        self.arch = arch
        self.lr_policy, self.lr_critic, self.optimizer_kind = lr_policy, lr_critic, optimizer
        self.policy = policy
        self.value = value
        self.value_target = _frozen_copy(value)
        self.q: Optional[CentralCritic] = None
        self.q_target: Optional[CentralCritic] = None
        self.policy_target: Optional[PolicyNet] = None
        self.optimizers: Dict[str, torch.optim.Optimizer] = {
            "policy": make_optimizer(policy, lr_policy, optimizer),
            "value": make_optimizer(value, lr_critic, optimizer),
        }
        if q is not None:
            self._attach_q(q)

    @classmethod
    def fresh(cls, arch: NetworkArch, seed: int, with_q: bool = False, **kwargs) -> "IdasNetworks":
        generator = torch.Generator().manual_seed(int(seed))
        policy = init_weights(PolicyNet(arch), generator)
        value = init_weights(ValueNet(arch), generator)
        q = init_weights(CentralCritic(arch), generator) if with_q else None
        return cls(arch, policy, value, q, **kwargs)

    def _attach_q(self, q: CentralCritic) -> None:
        self.q = q
        self.q_target = _frozen_copy(q)
        self.policy_target = _frozen_copy(self.policy)
        self.optimizers["q"] = make_optimizer(q, self.lr_critic, self.optimizer_kind)

    def add_centralized_critic(self, seed: int) -> None:
        """Attach a freshly initialized Q, its target and a target policy copied from the policy."""
        generator = torch.Generator().manual_seed(int(seed))
        self._attach_q(init_weights(CentralCritic(self.arch), generator))

    @property
    def has_q(self) -> bool:
        return self.q is not None

    def modules(self) -> Dict[str, nn.Module]:
        named = {"policy": self.policy, "value": self.value, "value_target": self.value_target}
        if self.has_q:
            named.update(q=self.q, q_target=self.q_target, policy_target=self.policy_target)
        return named

    def to_checkpoint(self, stage: str, step: int, episodes: int) -> Checkpoint:
        blocks: Dict[str, np.ndarray] = {"meta.arch": self.arch.to_vector()}
        for family, module in self.modules().items():
            for name, param in module.named_parameters():
                blocks[f"{family}.{name}"] = param.detach().numpy().copy()
        for family, optimizer in self.optimizers.items():
            module = self.modules()[family]
            for name, param in module.named_parameters():
                state = optimizer.state.get(param)
                if not state:
                    continue
                blocks[f"opt.{family}.{name}.step"] = np.array(float(state["step"]))
                blocks[f"opt.{family}.{name}.exp_avg"] = state["exp_avg"].detach().numpy().copy()
                blocks[f"opt.{family}.{name}.exp_avg_sq"] = state["exp_avg_sq"].detach().numpy().copy()
        return Checkpoint(stage=stage, step=step, episodes=episodes, blocks=blocks)

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint, **kwargs) -> "IdasNetworks":
        if "meta.arch" not in checkpoint.blocks:
            raise CheckpointError("checkpoint has no 'meta.arch' block")
        arch = NetworkArch.from_vector(checkpoint.blocks["meta.arch"])
        families = checkpoint.families()
        nets = cls(arch, PolicyNet(arch), ValueNet(arch),
                   CentralCritic(arch) if "q" in families else None, **kwargs)
        for family, module in nets.modules().items():
            _load_family(module, checkpoint, family)
        for family, optimizer in nets.optimizers.items():
            if not isinstance(optimizer, torch.optim.Adam):
                continue
            for name, param in nets.modules()[family].named_parameters():
                key = f"opt.{family}.{name}"
                if f"{key}.step" not in checkpoint.blocks:
                    continue
                optimizer.state[param] = {
                    "step": torch.tensor(float(checkpoint.blocks[f"{key}.step"])),
                    "exp_avg": torch.as_tensor(checkpoint.blocks[f"{key}.exp_avg"], dtype=DTYPE).clone(),
                    "exp_avg_sq": torch.as_tensor(checkpoint.blocks[f"{key}.exp_avg_sq"], dtype=DTYPE).clone(),
                }
        return nets


def _load_family(module: nn.Module, checkpoint: Checkpoint, family: str) -> None:
    stored = checkpoint.family(family)
    with torch.no_grad():
        for name, param in module.named_parameters():
            if name not in stored:
                raise CheckpointError(f"checkpoint is missing block '{family}.{name}'")
            data = stored[name]
            if tuple(data.shape) != tuple(param.shape):
                raise CheckpointError(
                    f"block '{family}.{name}' has shape {data.shape}, network expects {tuple(param.shape)}"
                )
            param.copy_(torch.as_tensor(data, dtype=DTYPE))


def load_policy(checkpoint: Checkpoint) -> PolicyNet:
    """Policy network alone, for evaluation."""
    arch = NetworkArch.from_vector(checkpoint.blocks["meta.arch"]) if "meta.arch" in checkpoint.blocks else None
    if arch is None:
        raise CheckpointError("checkpoint has no 'meta.arch' block")
    policy = PolicyNet(arch)
    _load_family(policy, checkpoint, "policy")
    policy.eval()
    return policy
