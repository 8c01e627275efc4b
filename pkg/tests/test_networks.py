import numpy as np
import pytest
import torch

from SmartMerge.errors import CheckpointError, MaskViolationError, NonFiniteError
from SmartMerge.networks import (
    DTYPE,
    CentralCritic,
    IdasNetworks,
    NetworkArch,
    PolicyNet,
    counterfactual_values,
    encode_observations,
    gradients,
    init_weights,
    load_policy,
    make_optimizer,
    masked_log_softmax,
    masked_softmax,
    optimize_step,
    q_forward,
    soft_update,
)
from SmartMerge.observation import build_observation


def _params(module):
    return {name: p.detach().clone() for name, p in module.named_parameters()}


def test_masked_softmax_zeroes_forbidden():
    logits = torch.tensor([[0.3, -1.0, 2.0, 0.0, 0.5, 1.0, 4.0]], dtype=DTYPE)
    mask = torch.tensor([[True, False, True, False, True, True, False]])
    probs = masked_softmax(logits, mask)
    assert torch.all(probs[~mask] == 0.0)
    assert float(probs.sum()) == pytest.approx(1.0)
    log_probs = masked_log_softmax(logits, mask)
    assert torch.all(log_probs[~mask] == 0.0)
    torch.testing.assert_close(log_probs[mask].exp(), probs[mask])


def test_empty_mask_has_no_distribution():
    with pytest.raises(MaskViolationError):
        masked_softmax(torch.zeros(1, 7, dtype=DTYPE), torch.zeros(1, 7, dtype=torch.bool))


def test_fresh_networks_are_seeded(tiny_arch):
    first = IdasNetworks.fresh(tiny_arch, seed=4, with_q=True)
    second = IdasNetworks.fresh(tiny_arch, seed=4, with_q=True)
    other = IdasNetworks.fresh(tiny_arch, seed=5, with_q=True)
    for name, param in first.policy.named_parameters():
        torch.testing.assert_close(param, dict(second.policy.named_parameters())[name], rtol=0, atol=0)
    assert not torch.equal(first.policy.fc4.weight, other.policy.fc4.weight)
    assert torch.all(first.q.fc1.bias == 0.0)


def test_policy_outputs_a_distribution(make_vehicle, make_world, small_arch):
    world = make_world(make_vehicle(id=0, s=50.0, v=10.0), make_vehicle(id=1, lane=1, s=55.0, v=9.0))
    inputs = encode_observations([build_observation(world, 0), build_observation(world, 1)], small_arch)
    assert tuple(inputs.grid.shape) == (2, 1, 4, 400)
    policy = init_weights(PolicyNet(small_arch), torch.Generator().manual_seed(0))
    mask = torch.ones(2, 7, dtype=torch.bool)
    mask[:, 6] = False
    probs = masked_softmax(policy(inputs), mask)
    assert probs.shape == (2, 7)
    torch.testing.assert_close(probs.sum(dim=1), torch.ones(2, dtype=DTYPE))


def test_encode_rejects_other_grid_sizes(make_vehicle, make_world, tiny_arch):
    world = make_world(make_vehicle())
    with pytest.raises(ValueError):
        encode_observations([build_observation(world, 0)], tiny_arch)


def test_critic_checks_slot_shapes(tiny_arch):
    q = CentralCritic(tiny_arch)
    with pytest.raises(ValueError):
        q(torch.zeros(1, 4, 4, dtype=DTYPE), torch.zeros(1, 4, dtype=torch.long), torch.zeros(1, 4, 2, dtype=DTYPE))


def test_counterfactual_values_match_substitution(tiny_arch):
    generator = torch.Generator().manual_seed(1)
    q = init_weights(CentralCritic(tiny_arch), generator)
    state = torch.rand(2, 3, 4, generator=generator, dtype=DTYPE)
    behaviors = torch.rand(2, 3, 2, generator=generator, dtype=DTYPE)
    joint = torch.tensor([[2, 5, -1], [0, 1, 4]])
    slot = torch.tensor([1, 2])
    values = counterfactual_values(q, state, joint, behaviors, slot)
    for row in range(2):
        for action in range(7):
            swapped = joint[row:row + 1].clone()
            swapped[0, slot[row]] = action
            expected = q(state[row:row + 1], swapped, behaviors[row:row + 1])[0]
            assert float(values[row, action]) == pytest.approx(float(expected), abs=1e-12)
    same = q_forward(q, state, joint, behaviors)
    torch.testing.assert_close(same, q(state, joint, behaviors))


def test_soft_update(tiny_arch):
    generator = torch.Generator().manual_seed(3)
    online = init_weights(PolicyNet(tiny_arch), generator)
    target = init_weights(PolicyNet(tiny_arch), generator)
    before = _params(target)
    soft_update(target, online, 0.25)
    for name, param in target.named_parameters():
        expected = 0.75 * before[name] + 0.25 * dict(online.named_parameters())[name].detach()
        torch.testing.assert_close(param.detach(), expected)
    soft_update(target, online, 1.0)
    torch.testing.assert_close(target.fc4.weight, online.fc4.weight)
    with pytest.raises(ValueError):
        soft_update(target, online, 0.0)


def test_optimize_step_rejects_non_finite(tiny_arch):
    policy = init_weights(PolicyNet(tiny_arch), torch.Generator().manual_seed(0))
    grads = {name: torch.zeros_like(p) for name, p in policy.named_parameters()}
    grads["fc5.weight"][0, 0] = float("nan")
    with pytest.raises(NonFiniteError, match="fc5.weight"):
        optimize_step(policy, grads, make_optimizer(policy, 1e-3))


def test_sgd_step_moves_against_gradient(tiny_arch):
    policy = init_weights(PolicyNet(tiny_arch), torch.Generator().manual_seed(0))
    before = _params(policy)
    grads = {name: torch.ones_like(p) for name, p in policy.named_parameters()}
    optimize_step(policy, grads, make_optimizer(policy, 0.1, "sgd"))
    torch.testing.assert_close(policy.head.bias.detach(), before["head.bias"] - 0.1)


def test_checkpoint_families_follow_stage(tiny_arch):
    stage1 = IdasNetworks.fresh(tiny_arch, seed=0).to_checkpoint("stage1", 0, 0)
    assert stage1.families() == ["policy", "value", "value_target"]
    nets = IdasNetworks.fresh(tiny_arch, seed=0)
    nets.add_centralized_critic(seed=1)
    stage2 = nets.to_checkpoint("stage2", 0, 0)
    assert stage2.families() == ["policy", "value", "value_target", "q", "q_target", "policy_target"]


def test_checkpoint_restores_networks_and_optimizer(tiny_arch):
    nets = IdasNetworks.fresh(tiny_arch, seed=0, with_q=True)
    grads = {name: torch.full_like(p, 0.01) for name, p in nets.policy.named_parameters()}
    optimize_step(nets.policy, grads, nets.optimizers["policy"])
    checkpoint = nets.to_checkpoint("stage2", 1, 1)
    assert any(name.startswith("opt.policy.") for name in checkpoint.blocks)
    restored = IdasNetworks.from_checkpoint(checkpoint)
    assert restored.to_checkpoint("stage2", 1, 1).to_bytes() == checkpoint.to_bytes()
    torch.testing.assert_close(load_policy(checkpoint).fc4.weight, nets.policy.fc4.weight.detach())


def test_load_policy_checks_shapes(tiny_arch):
    checkpoint = IdasNetworks.fresh(tiny_arch, seed=0).to_checkpoint("stage1", 0, 0)
    checkpoint.blocks["policy.fc4.weight"] = np.zeros((2, 2))
    with pytest.raises(CheckpointError, match="policy.fc4.weight"):
        load_policy(checkpoint)


def test_arch_round_trips_through_vector():
    arch = NetworkArch(branch_units=8, q_slots=4)
    assert NetworkArch.from_vector(arch.to_vector()) == arch


def test_adam_minimizes_a_scalar_quadratic():
    weight = torch.nn.Linear(1, 1, bias=False, dtype=DTYPE)
    with torch.no_grad():
        weight.weight.fill_(1.5)
    optimizer = make_optimizer(weight, lr=0.01)
    for _ in range(200):
        loss = ((weight.weight - 1.0) ** 2).sum()
        optimize_step(weight, gradients(loss, weight), optimizer)
    assert float(weight.weight) == pytest.approx(1.0, abs=0.05)


def test_zero_gradient_leaves_parameters():
    weight = torch.nn.Linear(1, 1, bias=False, dtype=DTYPE)
    before = _params(weight)
    optimize_step(weight, {"weight": torch.zeros_like(weight.weight)}, make_optimizer(weight, lr=0.01))
    torch.testing.assert_close(weight.weight.detach(), before["weight"])
