import pytest
import torch

from SmartMerge.networks import NetworkArch
from SmartMerge.simulator import BehaviorParams, RoadNetwork, VehicleState, WorldState


@pytest.fixture
def road():
    return RoadNetwork()


@pytest.fixture
def make_vehicle():
    """Factory for an active vehicle; b_prio follows the lane's priority on the default road."""

    def factory(id=0, lane=0, s=0.0, v=10.0, a=0.0, b_type=0.0, b_prio=None, active=True, **kwargs):
        if b_prio is None:
            b_prio = RoadNetwork().priorities[lane]
        return VehicleState(id=id, lane=lane, s=s, v=v, a=a, behavior=BehaviorParams(b_prio, b_type),
                            active=active, entered_step=0 if active else None, **kwargs)

    return factory


@pytest.fixture
def make_world(road):
    def factory(*vehicles, t=0, network=None):
        return WorldState(road=network or road, vehicles=tuple(vehicles), t=t)

    return factory


@pytest.fixture
def small_arch():
    """A reduced network over the full grid, for training runs."""
    return NetworkArch(branch_units=4, conv_filters=1, kernel_rows=3, kernel_cols=30, trunk_units=6,
                       q_slots=3, q_hidden=8)


@pytest.fixture
def tiny_arch():
    """Networks under 500 parameters over a 24-cell grid, for finite-difference checks."""
    return NetworkArch(grid_cells=24, branch_units=3, conv_filters=1, kernel_rows=3, kernel_cols=20, trunk_units=5,
                       q_slots=3, q_hidden=6)


@pytest.fixture(autouse=True)
def torch_threads():
    torch.set_num_threads(1)
    yield
