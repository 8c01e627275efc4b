import numpy as np
import pytest

from SmartMerge.baselines import (
    ConstantController,
    FsmIdmController,
    FsmState,
    earliest_arrival,
    fsm_idm_action,
    idm_action,
    make_controller,
    quantize_acceleration,
    random_action,
    robot_action,
)
from SmartMerge.errors import SimulationError
from SmartMerge.masking import ActionMask, action_mask
from SmartMerge.simulator import ActionId, RoadNetwork, WorldState


def test_quantize_nearest_and_ties(make_vehicle):
    vehicle = make_vehicle(a=0.0)
    everything = ActionMask.all_permitted()
    assert quantize_acceleration(0.13, vehicle, everything) == ActionId.ACC1
    assert quantize_acceleration(0.15, vehicle, everything) == ActionId.ACC1
    assert quantize_acceleration(1.0, vehicle, everything) == ActionId.ACC2
    assert quantize_acceleration(-2.5, vehicle, everything) == ActionId.HARD_BRAKE


def test_quantize_respects_mask(make_vehicle):
    mask = ActionMask.forbidding([ActionId.ACC1, ActionId.ACC2])
    assert quantize_acceleration(1.0, make_vehicle(a=0.0), mask) == ActionId.KEEP


def test_earliest_arrival():
    assert earliest_arrival(0.0, 10.0, 20.0) == 0.0
    assert earliest_arrival(100.0, 10.0, 20.0) == pytest.approx(6.25)
    assert earliest_arrival(10.0, 10.0, 20.0) == pytest.approx((-10.0 + np.sqrt(140.0)) / 2.0)


def test_idm_action_accelerates_on_free_road(make_vehicle, make_world):
    world = make_world(make_vehicle(s=10.0, v=10.0))
    assert idm_action(world, 0) == ActionId.ACC2


def test_robot_main_lane_never_yields(make_vehicle, make_world):
    world = make_world(make_vehicle(id=0, lane=0, s=130.0, v=10.0), make_vehicle(id=1, lane=1, s=130.0, v=10.0))
    assert robot_action(world, 0) == ActionId.ACC2
    assert robot_action(world, 1) == ActionId.HARD_BRAKE


def test_robot_merge_lane_goes_when_clear(make_vehicle, make_world):
    world = make_world(make_vehicle(id=0, lane=0, s=10.0, v=10.0), make_vehicle(id=1, lane=1, s=130.0, v=10.0))
    assert robot_action(world, 1) == ActionId.ACC2


def test_fsm_follows_virtual_leader_ahead(make_vehicle, make_world):
    world = make_world(make_vehicle(id=0, lane=0, s=135.0, v=10.0), make_vehicle(id=1, lane=1, s=130.0, v=10.0))
    action, state = fsm_idm_action(world, 1)
    assert state == FsmState("follow_virtual", 0)
    assert action == ActionId.HARD_BRAKE
    action, state = fsm_idm_action(world, 0)
    assert state == FsmState()
    assert action == idm_action(world, 0)


@pytest.mark.parametrize("priorities", [(1, 0), (1, 1)])
def test_fsm_exact_tie_merge_lane_yields(make_vehicle, priorities):
    road = RoadNetwork(priorities=priorities)
    world = WorldState(road=road, vehicles=(
        make_vehicle(id=0, lane=0, s=130.0, v=10.0, b_prio=priorities[0]),
        make_vehicle(id=1, lane=1, s=130.0, v=10.0, b_prio=priorities[1]),
    ))
    assert fsm_idm_action(world, 1)[1].mode == "follow_virtual"
    assert fsm_idm_action(world, 0)[1].mode == "free"


def test_fsm_ignores_far_vehicles(make_vehicle, make_world):
    world = make_world(make_vehicle(id=0, lane=0, s=100.0, v=10.0), make_vehicle(id=1, lane=1, s=60.0, v=10.0))
    assert fsm_idm_action(world, 1)[1] == FsmState()


def test_fsm_controller_tracks_state(make_vehicle, make_world):
    world = make_world(make_vehicle(id=0, lane=0, s=135.0, v=10.0), make_vehicle(id=1, lane=1, s=130.0, v=10.0))
    controller = FsmIdmController()
    decisions = controller.decide(world, [0, 1], {vid: action_mask(world, vid) for vid in (0, 1)})
    assert decisions[1].action == ActionId.HARD_BRAKE
    assert controller.states[1].virtual_leader == 0


def test_random_action_stays_in_mask(make_vehicle, make_world):
    world = make_world(make_vehicle(s=20.0, v=10.0))
    rng = np.random.default_rng(0)
    mask = ActionMask.forbidding([ActionId.ACC1, ActionId.ACC2, ActionId.RELEASE_BRAKE])
    drawn = {random_action(world, 0, rng, mask) for _ in range(200)}
    assert drawn == set(mask.permitted_actions())


def test_make_controller():
    assert make_controller("idm").name == "idm"
    assert make_controller("robot").name == "robot"
    assert make_controller("random", np.random.default_rng(1)).name == "random"
    with pytest.raises(ValueError):
        make_controller("random")
    with pytest.raises(SimulationError):
        make_controller("policy")


def test_constant_controller_brakes(make_vehicle, make_world):
    world = make_world(make_vehicle(s=20.0, v=10.0))
    assert ConstantController().action(world, 0, action_mask(world, 0)) == ActionId.HARD_BRAKE
