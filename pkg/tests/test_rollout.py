import numpy as np
import pandas as pd
import pytest
import torch

from SmartMerge.baselines import ConstantController, make_controller
from SmartMerge.networks import PolicyNet, init_weights
from SmartMerge.rollout import PolicyController, run_episode, sample_actions
from SmartMerge.scenario import ScenarioRandomization, ScenarioSpec, VehicleEntry, build_world, generate_scenario
from SmartMerge.simulator import ActionId
from SmartMerge.trajectory import TRAJECTORY_COLUMNS, read_trajectory, trajectory_frame, write_trajectory


def _random_episode(seed, max_steps=200):
    spec = generate_scenario(seed, ScenarioRandomization(agent_count=(4, 6)))
    world = build_world(spec)
    controller = make_controller("random", np.random.default_rng(seed))
    return run_episode(world, {v.id: controller for v in world.vehicles}, max_steps,
                       watch=[v.id for v in world.vehicles])


def _single_lane(controller_tag="idm"):
    entries = [VehicleEntry(lane=0, entry_time_s=0.0, initial_s=s, initial_v=10.0, b_type=0.0,
                            controller=controller_tag)
               for s in (0.0, 30.0, 60.0)]
    return build_world(ScenarioSpec(seed=0, vehicles=tuple(entries)))


def test_sample_actions_never_draws_zero_probability():
    probabilities = np.tile([0.0, 0.5, 0.0, 0.25, 0.25, 0.0, 0.0], (4000, 1))
    drawn = sample_actions(probabilities, np.random.default_rng(0))
    assert set(np.unique(drawn)) == {1, 3, 4}
    assert np.mean(drawn == 1) == pytest.approx(0.5, abs=0.03)


def test_random_episode_is_reproducible():
    first = trajectory_frame(_random_episode(3))
    second = trajectory_frame(_random_episode(3))
    pd.testing.assert_frame_equal(first, second)


@pytest.mark.parametrize("seed", range(5))
def test_chosen_actions_stay_inside_masks(seed):
    frame = trajectory_frame(_random_episode(seed))
    assert len(frame) > 0
    for action, mask in zip(frame["action"], frame["mask"]):
        assert mask[int(ActionId[action.upper()])] == "1"


def test_idm_platoon_finishes_without_collision():
    world = _single_lane()
    idm = make_controller("idm")
    result = run_episode(world, {v.id: idm for v in world.vehicles}, watch=[0, 1, 2])
    assert result.terminated_by == "finished"
    assert all(v.finished for v in result.final_world.vehicles)
    assert not any(step.events.collisions for step in result.steps)


def test_step_cap_ends_the_episode():
    world = _single_lane()
    braking = ConstantController()
    result = run_episode(world, {v.id: braking for v in world.vehicles}, max_steps=5)
    assert result.terminated_by == "step_cap"
    assert len(result.steps) == 5


def test_every_vehicle_needs_a_controller():
    world = _single_lane()
    with pytest.raises(KeyError):
        run_episode(world, {0: make_controller("idm")})


def test_policy_controller_batches_decisions(small_arch):
    policy = init_weights(PolicyNet(small_arch), torch.Generator().manual_seed(0))
    world = _single_lane("policy")
    learner = PolicyController(policy, np.random.default_rng(0))
    result = run_episode(world, {v.id: learner for v in world.vehicles}, max_steps=10)
    first = result.steps[0].decisions
    assert sorted(first) == [0, 1, 2]
    for decision in first.values():
        assert decision.observation is not None
        assert decision.probabilities.sum() == pytest.approx(1.0)
    assert result.rewards_of(0) == [step.rewards.per_agent.get(0, 0.0) for step in result.steps]


def test_greedy_policy_is_deterministic(small_arch):
    policy = init_weights(PolicyNet(small_arch), torch.Generator().manual_seed(1))
    frames = []
    for seed in (0, 1):
        world = _single_lane("policy")
        learner = PolicyController(policy, np.random.default_rng(seed), greedy=True)
        frames.append(trajectory_frame(run_episode(world, {v.id: learner for v in world.vehicles}, max_steps=20)))
    pd.testing.assert_frame_equal(frames[0], frames[1])


def test_trajectory_file_keeps_columns_and_masks(tmp_path):
    result = _random_episode(1, max_steps=100)
    ego = int(trajectory_frame(result)["vehicle_id"].iloc[0])
    frame = trajectory_frame(result, roles={ego: "ego"})
    path = write_trajectory(frame, tmp_path / "logs" / "trajectory.csv")
    loaded = read_trajectory(path)
    assert list(loaded.columns) == TRAJECTORY_COLUMNS
    assert list(loaded["mask"]) == list(frame["mask"])
    assert set(loaded.loc[loaded["vehicle_id"] == ego, "role"]) == {"ego"}
    with pytest.raises(IOError):
        read_trajectory(tmp_path / "missing.csv")


def test_trajectory_rows_follow_decisions():
    result = _random_episode(2, max_steps=20)
    frame = trajectory_frame(result)
    assert len(frame) == sum(len(step.decisions) for step in result.steps)
    assert frame["t"].is_monotonic_increasing
    np.testing.assert_allclose(frame["time_s"], frame["t"] * 0.2)
