"""Open-loop dynamics of car-following pairs and the virtual leader.

The pair representation is the state of record: vehicle i is described by its
position and speed relative to vehicle i-1, and vehicle 0 follows a virtual
leader i = -1 that cruises at the scheduled speed and never accelerates.
Absolute positions and speeds are prefix sums over the pairs.
"""

import logging
import math
from typing import List, Sequence, Tuple

import numpy as np

from .errors import DomainError
from .models import CarFollowingState, PlatoonState, VehicleState

logger = logging.getLogger(__name__)


def pair_derivative(chi: CarFollowingState, u_follower: float, u_leader: float) -> Tuple[float, float]:
    """Time derivative (d dp/dt, d dv/dt) of a pair under the two accelerations."""
    if not (math.isfinite(u_follower) and math.isfinite(u_leader)):
        raise DomainError(f"accelerations must be finite, got u_follower={u_follower}, u_leader={u_leader}")
    return chi.dv, u_follower - u_leader


def virtual_leader_advance(leader: VehicleState, v_bar: float, dt: float) -> VehicleState:
    """Move the virtual leader one step at the scheduled speed."""
    if not dt > 0:
        raise DomainError(f"dt must be positive, got {dt}")
    if not math.isfinite(v_bar):
        raise DomainError(f"v_bar must be finite, got {v_bar}")
    return VehicleState(p=leader.p + v_bar * dt, v=v_bar)


def reconstruct_absolute(platoon: PlatoonState) -> List[VehicleState]:
    """Absolute states of vehicles 0..N from the leader and the pair chain."""
    dp = np.array([pair.chi.dp for pair in platoon.pairs])
    dv = np.array([pair.chi.dv for pair in platoon.pairs])
    positions = platoon.leader.p + np.cumsum(dp)
    speeds = platoon.leader.v + np.cumsum(dv)
    return [VehicleState(p=float(p), v=float(v)) for p, v in zip(positions, speeds)]


def pairs_from_absolute(leader: VehicleState, vehicles: Sequence[VehicleState]) -> List[CarFollowingState]:
    """Inverse of reconstruct_absolute: differences against each predecessor."""
    p = np.array([leader.p] + [veh.p for veh in vehicles])
    v = np.array([leader.v] + [veh.v for veh in vehicles])
    return [CarFollowingState(dp=float(a), dv=float(b)) for a, b in zip(np.diff(p), np.diff(v))]


def clamp_speeds(dv: np.ndarray, v_leader: float, v_min: float, v_max: float) -> Tuple[np.ndarray, np.ndarray]:
    """Project absolute speeds onto [v_min, v_max] and return the adjusted pair speeds.

    Returns the new relative speeds and a boolean mask of clamped vehicles; the
    input array is returned untouched when nothing is clamped.
    """
    speeds = v_leader + np.cumsum(dv)
    clamped = (speeds < v_min) | (speeds > v_max)
    if not clamped.any():
        return dv, clamped
    speeds = np.clip(speeds, v_min, v_max)
    logger.debug(f"Speed clamp engaged for vehicles {np.flatnonzero(clamped).tolist()}")
    return np.diff(speeds, prepend=v_leader), clamped
