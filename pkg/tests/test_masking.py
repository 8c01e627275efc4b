import pytest

from SmartMerge.errors import SimulationError
from SmartMerge.masking import (
    ActionMask,
    IdmParams,
    action_mask,
    combine_masks,
    idm_acceleration,
    kinematic_mask,
    rule_mask,
    safety_mask,
)
from SmartMerge.simulator import ActionId

DELTA_ACTIONS = {ActionId.DEC2, ActionId.DEC1, ActionId.KEEP, ActionId.ACC1, ActionId.ACC2}


def test_idm_free_road_equilibrium():
    assert idm_acceleration(20.0, None, None, IdmParams(v0=20.0)) == pytest.approx(0.0)


def test_idm_standstill_at_minimum_gap():
    assert idm_acceleration(0.0, 0.0, 2.0, IdmParams()) == pytest.approx(0.0)


def test_idm_closing_on_slower_leader():
    p = IdmParams(a_max=2.0, b_comf=2.0, v0=20.0, delta=4.0, s0=2.0, t_headway=1.5)
    expected = 2.0 * (1.0 - (15.0 / 20.0) ** 4 - (43.25 / 30.0) ** 2)
    assert idm_acceleration(15.0, 10.0, 30.0, p) == pytest.approx(expected)
    assert expected == pytest.approx(-2.79, abs=5e-3)


def test_idm_rejects_non_positive_gap():
    with pytest.raises(SimulationError):
        idm_acceleration(5.0, 0.0, 0.0, IdmParams())


def test_idm_result_is_clamped():
    assert idm_acceleration(20.0, 0.0, 0.5, IdmParams()) == -4.0
    assert idm_acceleration(0.0, None, None, IdmParams()) == 2.0


def test_kinematic_mask_bounds(make_vehicle):
    assert kinematic_mask(make_vehicle(a=2.0)).forbidden == {ActionId.ACC1, ActionId.ACC2, ActionId.RELEASE_BRAKE}
    assert kinematic_mask(make_vehicle(a=-2.0)).forbidden == {ActionId.DEC1, ActionId.DEC2, ActionId.RELEASE_BRAKE}
    assert kinematic_mask(make_vehicle(a=0.0)).forbidden == {ActionId.RELEASE_BRAKE}
    assert kinematic_mask(make_vehicle(a=-4.0, post_brake=True)).is_permitted(ActionId.RELEASE_BRAKE)


def test_rule_mask_at_speed_limit(make_vehicle, road):
    mask = rule_mask(make_vehicle(s=0.0, v=20.0), road)
    assert mask.forbidden == {ActionId.ACC1, ActionId.ACC2}
    assert mask.is_permitted(ActionId.KEEP)


def test_rule_mask_merge_exemption(make_vehicle, road):
    mask = rule_mask(make_vehicle(lane=1, s=100.0, v=15.0), road)
    assert mask.is_permitted(ActionId.ACC2)
    capped = rule_mask(make_vehicle(lane=1, s=100.0, v=20.0), road)
    assert ActionId.ACC1 in capped.forbidden


def test_rule_mask_from_rest(make_vehicle, road):
    assert rule_mask(make_vehicle(s=0.0, v=0.0), road).forbidden == frozenset()


def test_safety_mask_without_leader(make_vehicle, make_world):
    world = make_world(make_vehicle(s=50.0, v=10.0))
    assert safety_mask(world.vehicles[0], world) == ActionMask.all_permitted()


def test_safety_mask_stopped_behind_stopped_leader(make_vehicle, make_world):
    world = make_world(make_vehicle(id=0, s=100.0, v=0.0), make_vehicle(id=1, s=106.0, v=0.0))
    mask = safety_mask(world.vehicles[0], world)
    assert mask.forbidden == {ActionId.ACC1, ActionId.ACC2}


def test_safety_mask_slow_near_leader_leaves_hard_brake(make_vehicle, make_world):
    world = make_world(make_vehicle(id=0, s=100.0, v=10.0), make_vehicle(id=1, s=124.0, v=5.0))
    combined = action_mask(world, 0)
    assert combined.permitted_actions() == (ActionId.HARD_BRAKE,)


def test_combine_masks():
    everything = ActionMask.all_permitted()
    assert combine_masks(everything, everything, everything) == everything
    merged = combine_masks(ActionMask.forbidding([ActionId.ACC2]), everything, ActionMask.forbidding([ActionId.ACC1]))
    assert {ActionId.ACC1, ActionId.ACC2} <= merged.forbidden
    none_left = ActionMask.forbidding(DELTA_ACTIONS | {ActionId.RELEASE_BRAKE, ActionId.HARD_BRAKE})
    assert combine_masks(none_left, everything, everything).permitted_actions() == (ActionId.HARD_BRAKE,)


def test_mask_string_and_array():
    mask = ActionMask.forbidding([ActionId.RELEASE_BRAKE])
    assert str(mask) == "1111110"
    assert ActionMask.from_array(mask.as_array()) == mask


def test_safety_mask_monotone_in_gap(make_vehicle, make_world):
    previous = None
    for leader_s in (160.0, 140.0, 125.0, 115.0, 110.0, 106.5):
        world = make_world(make_vehicle(id=0, s=100.0, v=8.0, a=0.5), make_vehicle(id=1, s=leader_s, v=6.0))
        permitted = set(safety_mask(world.vehicles[0], world).permitted_actions())
        if previous is not None:
            assert permitted <= previous
        previous = permitted


def test_release_brake_only_after_hard_brake(make_vehicle, make_world):
    world = make_world(make_vehicle(id=0, s=20.0, v=10.0, a=-4.0, post_brake=True))
    assert action_mask(world, 0).is_permitted(ActionId.RELEASE_BRAKE)
    world = make_world(make_vehicle(id=0, s=20.0, v=10.0, a=0.0))
    assert not action_mask(world, 0).is_permitted(ActionId.RELEASE_BRAKE)
