"""Fixed-step closed-loop simulation of the platoon.

The engine integrates the stacked state (dp, dv, rho) of every vehicle with
classical RK4.  Per step:

1. the leader speed is read from the schedule; a change shifts dv_0, since the
   virtual leader jumps to the new speed without accelerating;
2. psi for every vehicle is computed over its predecessors and held for the
   whole step;
3. within each RK4 stage the control laws run in index order, each vehicle
   adding its relative command to the predecessor's broadcast command
   (clamped to +-a_max, zero for the virtual leader);
4. the plant applies clamp(u_cmd + w) where w is the vehicle's disturbance,
   which is never broadcast;
5. after the step, absolute speeds are projected onto [v_min, v_max].

Identical scenarios produce bit-identical logs.
"""

import logging
from bisect import bisect_right
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .control import relative_command
from .dynamics import clamp_speeds, virtual_leader_advance
from .errors import DomainError, SimulationDiverged
from .macro import filter_derivative, predecessor_psi
from .models import (
    CarFollowingState,
    EquilibriumSpec,
    InitialConditionSpec,
    Scenario,
    TrajectoryLog,
    VehicleState,
)

logger = logging.getLogger(__name__)


def reference_speed_at(schedule: Sequence[Tuple[float, float]], t: float) -> float:
    """Piecewise-constant leader speed; each breakpoint opens a left-closed interval."""
    if t < 0:
        raise DomainError(f"time must be non-negative, got {t}")
    if not schedule:
        raise DomainError("empty speed schedule")
    index = bisect_right([start for start, _ in schedule], t) - 1
    return float(schedule[max(index, 0)][1])


def draw_initial_conditions(spec: InitialConditionSpec, eq: EquilibriumSpec, n: int) -> List[CarFollowingState]:
    """Uniform draws around the equilibrium from the seeded generator."""
    rng = np.random.default_rng(spec.seed)
    draws = rng.uniform(
        low=(-spec.dp_halfwidth, -spec.dv_halfwidth),
        high=(spec.dp_halfwidth, spec.dv_halfwidth),
        size=(n, 2),
    )
    if spec.head_only:
        draws[1:] = 0.0
    return [CarFollowingState(dp=float(-eq.dp_bar + ddp), dv=float(ddv)) for ddp, ddv in draws]


def rk4_step(f: Callable[[float, np.ndarray], np.ndarray], t: float, x: np.ndarray, dt: float,
             k1: Optional[np.ndarray] = None) -> np.ndarray:
    """One classical Runge-Kutta step; k1 may be passed in when already known."""
    if k1 is None:
        k1 = f(t, x)
    k2 = f(t + dt / 2, x + dt / 2 * k1)
    k3 = f(t + dt / 2, x + dt / 2 * k2)
    k4 = f(t + dt, x + dt * k3)
    return x + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def propagate_commands(local: np.ndarray, w: np.ndarray, a_max: float) -> Tuple[np.ndarray, np.ndarray]:
    """Chain the relative commands down the platoon.

    Returns the commanded accelerations (unsaturated) and the accelerations the
    plants apply.
    """
    u_cmd = np.empty(len(local))
    broadcast = 0.0
    for i, value in enumerate(local.tolist()):
        command = broadcast + value
        u_cmd[i] = command
        broadcast = min(max(command, -a_max), a_max)
    return u_cmd, np.clip(u_cmd + w, -a_max, a_max)


class ClosedLoop:
    """Right-hand side of the stacked platoon state for one scenario."""

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.params = scenario.controller
        self.policy = scenario.controller.policy
        self.n = scenario.n_vehicles
        self.r = self.policy.rho_dim

    def unpack(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        n = self.n
        return x[:n], x[n:2 * n], x[2 * n:].reshape(n, self.r)

    def disturbance(self, t: float) -> np.ndarray:
        w = np.zeros(self.n)
        for item in self.scenario.disturbances:
            w[item.target] += item.value(t)
        return w

    def evaluate(self, t: float, x: np.ndarray, drive: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        dp, dv, rho = self.unpack(x)
        local, _ = relative_command(self.policy, dp + self.scenario.eq.dp_bar, dv, rho, drive, self.params)
        u_cmd, u_app = propagate_commands(local, self.disturbance(t), self.scenario.limits.a_max)
        ddv = u_app - np.concatenate(([0.0], u_app[:-1]))
        drho = filter_derivative(rho, drive, self.params.rho)
        return np.concatenate([dv, ddv, drho.ravel()]), u_cmd, u_app

    def check_finite(self, x: np.ndarray, step: int, t: float) -> None:
        dp, dv, rho = self.unpack(x)
        errors = np.column_stack([dp + self.scenario.eq.dp_bar, dv, rho])
        magnitude = np.max(np.where(np.isfinite(errors), np.abs(errors), np.inf), axis=1)
        worst = int(np.argmax(magnitude))
        if magnitude[worst] > self.scenario.divergence_limit:
            logger.error(f"Divergence at step {step}, vehicle {worst}")
            raise SimulationDiverged(step=step, vehicle=worst, time=t, value=float(magnitude[worst]))


def simulate(scenario: Scenario) -> TrajectoryLog:
    """Integrate the closed-loop platoon over the scenario horizon."""
    loop = ClosedLoop(scenario)
    n, r, dt = loop.n, loop.r, scenario.dt
    steps = scenario.n_steps
    eq, limits, rho_params = scenario.eq, scenario.limits, scenario.controller.rho

    pairs = draw_initial_conditions(scenario.ic, eq, n)
    x = np.concatenate([
        [pair.dp for pair in pairs],
        [pair.dv for pair in pairs],
        np.zeros(n * r),
    ])
    leader = VehicleState(p=0.0, v=reference_speed_at(scenario.speed_schedule, 0.0))

    samples = steps + 1
    t_log = np.arange(samples) * dt
    v_ref = np.empty(samples)
    leader_p = np.empty(samples)
    dp_log = np.empty((samples, n))
    dv_log = np.empty((samples, n))
    rho_log = np.empty((samples, n, r))
    u_cmd_log = np.empty((samples, n))
    u_app_log = np.empty((samples, n))
    psi_dp_log = np.empty((samples, n))
    psi_dv_log = np.empty((samples, n))
    clamp_events = 0

    logger.info(f"Simulating {n} vehicles ({scenario.controller.policy.value} spacing) for {scenario.t_end} s, dt={dt}")
    for k in range(samples):
        t = t_log[k]
        v_bar = reference_speed_at(scenario.speed_schedule, t)
        if v_bar != leader.v:
            logger.debug(f"Leader speed {leader.v} -> {v_bar} at t={t:g}")
            x[n] -= v_bar - leader.v
            leader = VehicleState(p=leader.p, v=v_bar)

        dp, dv, rho = loop.unpack(x)
        psi_dp, psi_dv = predecessor_psi(dp, dv, eq, rho_params)
        drive = rho_params.a * psi_dp + rho_params.b * psi_dv
        k1, u_cmd, u_app = loop.evaluate(t, x, drive)

        v_ref[k] = v_bar
        leader_p[k] = leader.p
        dp_log[k], dv_log[k], rho_log[k] = dp, dv, rho
        u_cmd_log[k], u_app_log[k] = u_cmd, u_app
        psi_dp_log[k], psi_dv_log[k] = psi_dp, psi_dv
        if k == steps:
            break

        x_next = rk4_step(lambda tt, xx: loop.evaluate(tt, xx, drive)[0], t, x, dt, k1=k1)
        leader = virtual_leader_advance(leader, v_bar, dt)
        dv_next, clamped = clamp_speeds(x_next[n:2 * n], leader.v, limits.v_min, limits.v_max)
        if clamped.any():
            if clamp_events == 0:
                logger.warning(f"Speed bounds reached at t={t:g} for vehicles {np.flatnonzero(clamped).tolist()}")
            clamp_events += 1
            effective = (np.cumsum(dv_next) - np.cumsum(dv)) / dt
            u_app_log[k, clamped] = effective[clamped]
            x_next[n:2 * n] = dv_next
        loop.check_finite(x_next, step=k + 1, t=t_log[k + 1])
        x = x_next

    min_gap = float(np.min(-dp_log))
    if min_gap <= 0:
        logger.warning(f"Non-positive gap reached: {min_gap:.3f} m")
    if clamp_events:
        logger.info(f"Speed clamp engaged in {clamp_events} steps")
    logger.info(f"Simulation finished: {samples} samples, min gap {min_gap:.3f} m")

    return TrajectoryLog(
        t=t_log, v_ref=v_ref, leader_p=leader_p, dp=dp_log, dv=dv_log, rho=rho_log,
        u_cmd=u_cmd_log, u_app=u_app_log, psi_dp=psi_dp_log, psi_dv=psi_dv_log, scenario=scenario,
    )
