import math

import numpy as np
import pytest

from mesoplatoon.dynamics import (
    clamp_speeds,
    pair_derivative,
    pairs_from_absolute,
    reconstruct_absolute,
    virtual_leader_advance,
)
from mesoplatoon.errors import DomainError
from mesoplatoon.models import CarFollowingState, ExtendedPairState, PlatoonState, VehicleState


def test_pair_derivative_is_relative_speed_and_acceleration():
    chi = CarFollowingState(dp=-20.0, dv=0.5)
    assert pair_derivative(chi, u_follower=1.5, u_leader=-0.5) == (0.5, 2.0)


def test_pair_at_equilibrium_with_equal_accelerations_stays_put():
    chi = CarFollowingState(dp=-20.0, dv=0.0)
    assert pair_derivative(chi, 3.0, 3.0) == (0.0, 0.0)


@pytest.mark.parametrize("u_follower, u_leader", [(math.nan, 0.0), (0.0, math.inf)])
def test_pair_derivative_rejects_non_finite_input(u_follower, u_leader):
    with pytest.raises(DomainError):
        pair_derivative(CarFollowingState(dp=-20.0, dv=0.0), u_follower, u_leader)


def test_non_finite_pair_state_is_rejected():
    with pytest.raises(DomainError):
        CarFollowingState(dp=math.nan, dv=0.0)


def test_virtual_leader_moves_at_scheduled_speed():
    leader = virtual_leader_advance(VehicleState(p=10.0, v=14.0), v_bar=25.0, dt=0.5)
    assert leader.p == pytest.approx(22.5)
    assert leader.v == 25.0


@pytest.mark.parametrize("dt", [0.0, -0.01])
def test_virtual_leader_rejects_non_positive_step(dt):
    with pytest.raises(DomainError):
        virtual_leader_advance(VehicleState(p=0.0, v=14.0), 14.0, dt)


def test_absolute_reconstruction_is_inverse_of_pair_differences():
    leader = VehicleState(p=100.0, v=14.0)
    vehicles = [VehicleState(p=80.5, v=13.0), VehicleState(p=61.0, v=13.5), VehicleState(p=40.0, v=15.0)]
    pairs = pairs_from_absolute(leader, vehicles)
    assert [p.dp for p in pairs] == pytest.approx([-19.5, -19.5, -21.0])
    assert [p.dv for p in pairs] == pytest.approx([-1.0, 0.5, 1.5])

    platoon = PlatoonState(pairs=[ExtendedPairState(chi=pair) for pair in pairs], leader=leader)
    rebuilt = reconstruct_absolute(platoon)
    assert [v.p for v in rebuilt] == pytest.approx([v.p for v in vehicles])
    assert [v.v for v in rebuilt] == pytest.approx([v.v for v in vehicles])
    assert platoon.n_vehicles == 3


def test_clamp_speeds_leaves_admissible_speeds_untouched():
    dv = np.array([1.0, -2.0, 0.5])
    new, clamped = clamp_speeds(dv, v_leader=14.0, v_min=0.0, v_max=36.0)
    assert new is dv
    assert not clamped.any()


def test_clamp_speeds_projects_onto_bounds():
    # absolute speeds 14 + cumsum: 15, -1, 40
    dv = np.array([1.0, -16.0, 41.0])
    new, clamped = clamp_speeds(dv, v_leader=14.0, v_min=0.0, v_max=36.0)
    np.testing.assert_array_equal(clamped, [False, True, True])
    np.testing.assert_allclose(14.0 + np.cumsum(new), [15.0, 0.0, 36.0])
