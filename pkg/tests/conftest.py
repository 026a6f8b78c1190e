from pathlib import Path

import pytest

from mesoplatoon.models import (
    ControllerParams,
    EquilibriumSpec,
    InitialConditionSpec,
    Limits,
    Policy,
    Scenario,
    TrajectoryLog,
)
from mesoplatoon.simulate import simulate

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture
def cp_params() -> ControllerParams:
    return ControllerParams.constant_reference()


@pytest.fixture
def vp_params() -> ControllerParams:
    return ControllerParams.variable_reference()


@pytest.fixture
def eq() -> EquilibriumSpec:
    return EquilibriumSpec()


@pytest.fixture
def config_dir() -> Path:
    return CONFIG_DIR


def quiet_scenario(controller: ControllerParams, n_vehicles: int = 6, t_end: float = 10.0, dt: float = 0.01,
                   seed: int = 0, dp_halfwidth: float = 2.0, dv_halfwidth: float = 1.0,
                   head_only: bool = False, v: float = 14.0, **kwargs) -> Scenario:
    """Constant-speed leader, no disturbances."""
    return Scenario(
        n_vehicles=n_vehicles,
        dt=dt,
        t_end=t_end,
        speed_schedule=((0.0, v),),
        disturbances=(),
        ic=InitialConditionSpec(seed=seed, dp_halfwidth=dp_halfwidth, dv_halfwidth=dv_halfwidth, head_only=head_only),
        controller=controller,
        **kwargs,
    )


@pytest.fixture
def quiet():
    return quiet_scenario


@pytest.fixture
def unsaturated() -> Limits:
    return Limits(a_max=1000.0, v_max=1000.0, v_min=0.0)


@pytest.fixture(scope="session")
def reference_log():
    """Full four-phase reference runs, simulated once per session."""
    logs = {}

    def run(policy: Policy) -> TrajectoryLog:
        if policy not in logs:
            params = (ControllerParams.constant_reference() if policy is Policy.CONSTANT
                      else ControllerParams.variable_reference())
            logs[policy] = simulate(Scenario(controller=params))
        return logs[policy]

    return run
