import math

import numpy as np
import pytest

from mesoplatoon.control import error_field
from mesoplatoon.errors import DomainError, SimulationDiverged
from mesoplatoon.macro import predecessor_psi
from mesoplatoon.models import (
    REFERENCE_DISTURBANCES,
    REFERENCE_SPEED_SCHEDULE,
    ControllerParams,
    Disturbance,
    DisturbanceKind,
    InitialConditionSpec,
    Limits,
    Policy,
    RhoParams,
    Scenario,
)
from mesoplatoon.simulate import (
    draw_initial_conditions,
    propagate_commands,
    reference_speed_at,
    rk4_step,
    simulate,
)
from mesoplatoon.stability import attenuation_profile


@pytest.mark.parametrize("t, expected", [
    (0.0, 14.0), (9.99, 14.0), (10.0, 25.0), (19.99, 25.0), (20.0, 20.0),
    (35.0, 14.0), (44.99, 14.0), (45.0, 25.0), (60.0, 25.0),
])
def test_reference_speed_schedule(t, expected):
    assert reference_speed_at(REFERENCE_SPEED_SCHEDULE, t) == expected


def test_reference_speed_rejects_negative_time():
    with pytest.raises(DomainError):
        reference_speed_at(REFERENCE_SPEED_SCHEDULE, -0.01)


def test_disturbance_windows_are_left_closed():
    pulse, sinusoid = REFERENCE_DISTURBANCES
    assert pulse.value(24.99) == 0.0
    assert pulse.value(25.0) == 4.0
    assert pulse.value(30.0) == 0.0
    assert sinusoid.value(35.0) == pytest.approx(0.0)
    assert sinusoid.value(35.0 + math.pi / 2) == pytest.approx(2.0)
    assert sinusoid.value(60.0) == 0.0


def test_initial_conditions_are_seeded_and_bounded(eq):
    spec = InitialConditionSpec(seed=7, dp_halfwidth=2.0, dv_halfwidth=1.0)
    first = draw_initial_conditions(spec, eq, 31)
    second = draw_initial_conditions(spec, eq, 31)
    assert first == second
    assert all(abs(p.dp + eq.dp_bar) <= 2.0 and abs(p.dv) <= 1.0 for p in first)
    assert first != draw_initial_conditions(InitialConditionSpec(seed=8), eq, 31)


def test_head_only_initial_conditions(eq):
    spec = InitialConditionSpec(seed=3, head_only=True)
    pairs = draw_initial_conditions(spec, eq, 10)
    assert pairs[0] != eq.chi_bar
    assert all(p == eq.chi_bar for p in pairs[1:])
    # the head pair does not depend on the platoon length
    assert draw_initial_conditions(spec, eq, 4)[0] == pairs[0]


def test_commands_chain_through_saturated_broadcast():
    u_cmd, u_app = propagate_commands(np.array([1.0, 5.0, -2.0]), np.zeros(3), a_max=4.0)
    np.testing.assert_allclose(u_cmd, [1.0, 6.0, 2.0])
    np.testing.assert_allclose(u_app, [1.0, 4.0, 2.0])


def test_disturbance_is_applied_but_not_broadcast():
    u_cmd, u_app = propagate_commands(np.array([0.0, 0.0]), np.array([1.5, 0.0]), a_max=4.0)
    np.testing.assert_allclose(u_cmd, [0.0, 0.0])
    np.testing.assert_allclose(u_app, [1.5, 0.0])


def test_rk4_step_is_exact_for_cubic_time():
    x = rk4_step(lambda t, x: np.array([3 * t * t]), 0.0, np.array([0.0]), 0.5)
    assert x[0] == pytest.approx(0.125)


def test_log_shape(cp_params, quiet):
    scenario = quiet(cp_params, n_vehicles=4, t_end=1.0, dt=0.1)
    log = simulate(scenario)
    assert log.t.shape == (11,)
    assert log.t[-1] == pytest.approx(1.0)
    assert log.dp.shape == (11, 4)
    assert log.rho.shape == (11, 4, 1)
    assert log.policy is cp_params.policy


def test_identical_scenarios_give_identical_logs(vp_params, quiet):
    scenario = quiet(vp_params, n_vehicles=5, t_end=2.0, seed=4)
    first, second = simulate(scenario), simulate(scenario)
    for name in ("dp", "dv", "rho", "u_cmd", "u_app", "psi_dp", "psi_dv"):
        np.testing.assert_array_equal(getattr(first, name), getattr(second, name))


@pytest.mark.slow
@pytest.mark.parametrize("params_name", ["cp_params", "vp_params"])
def test_equilibrium_is_preserved(request, params_name, quiet):
    params = request.getfixturevalue(params_name)
    log = simulate(quiet(params, n_vehicles=31, t_end=60.0, dp_halfwidth=0.0, dv_halfwidth=0.0))
    assert np.max(log.error_norms()) <= 1e-9


def test_leader_speed_change_shifts_head_pair(cp_params, eq):
    scenario = Scenario(
        n_vehicles=3, dt=0.01, t_end=1.0, speed_schedule=((0.0, 14.0), (1.0, 15.0)), disturbances=(),
        ic=InitialConditionSpec(dp_halfwidth=0.0, dv_halfwidth=0.0), controller=cp_params,
    )
    log = simulate(scenario)
    assert log.v_ref[-1] == 15.0
    assert log.dv[-1, 0] == pytest.approx(-1.0)
    np.testing.assert_allclose(log.dv[-1, 1:], 0.0, atol=1e-12)
    assert log.absolute_speeds()[-1, 0] == pytest.approx(14.0)


def halving_ratio(quiet, params, dts, dp_halfwidth, dv_halfwidth):
    """Ratio of successive sup-norm differences as dt is halved twice."""
    logs = [
        simulate(quiet(params, n_vehicles=4, t_end=5.0, dt=dt, seed=2,
                       dp_halfwidth=dp_halfwidth, dv_halfwidth=dv_halfwidth))
        for dt in dts
    ]
    coarse = logs[0].error_states()
    medium = logs[1].error_states()[::2]
    fine = logs[2].error_states()[::4]
    first = np.max(np.abs(coarse - medium))
    second = np.max(np.abs(medium - fine))
    assert second > 0
    return first / second


def test_rk4_converges_at_high_order_without_macroscopic_input(quiet):
    params = ControllerParams(rho=RhoParams(a=0.0, b=0.0))
    assert halving_ratio(quiet, params, (0.1, 0.05, 0.025), 0.1, 0.05) >= 8.0


def test_rk4_converges_at_high_order_with_macroscopic_input(quiet, cp_params):
    assert halving_ratio(quiet, cp_params, (0.02, 0.01, 0.005), 2.0, 1.0) >= 8.0


def test_held_macroscopic_input_is_first_order_near_equilibrium(quiet, cp_params):
    # psi is held over each step; with small errors it dominates the step error
    ratio = halving_ratio(quiet, cp_params, (0.1, 0.05, 0.025), 0.1, 0.05)
    assert 1.5 < ratio < 4.0


def test_engine_matches_stacked_error_dynamics(vp_params, quiet, unsaturated, eq):
    scenario = quiet(vp_params, n_vehicles=8, t_end=2.0, seed=5, limits=unsaturated)
    log = simulate(scenario)

    pairs = draw_initial_conditions(scenario.ic, eq, 8)
    x = np.zeros((8, 4))
    x[:, 0] = [p.dp + eq.dp_bar for p in pairs]
    x[:, 1] = [p.dv for p in pairs]
    rho = vp_params.rho
    for k in range(scenario.n_steps):
        np.testing.assert_allclose(x, log.error_states()[k], atol=1e-9)
        psi_dp, psi_dv = predecessor_psi(x[:, 0] - eq.dp_bar, x[:, 1], eq, rho)
        drive = rho.a * psi_dp + rho.b * psi_dv
        x = rk4_step(lambda t, state: error_field(vp_params.policy, state, drive, vp_params), k * scenario.dt, x,
                     scenario.dt)
    np.testing.assert_allclose(x, log.error_states()[-1], atol=1e-9)


def test_divergence_names_step_and_vehicle(cp_params, quiet):
    scenario = quiet(cp_params, n_vehicles=6, t_end=1.0, divergence_limit=1e-3)
    with pytest.raises(SimulationDiverged) as caught:
        simulate(scenario)
    assert caught.value.step == 1
    assert 0 <= caught.value.vehicle < 6
    assert "step 1" in str(caught.value)
    assert "vehicle" in str(caught.value)


def test_speeds_stay_within_bounds(cp_params):
    scenario = Scenario(
        n_vehicles=3, dt=0.01, t_end=3.0, speed_schedule=((0.0, 1.0),),
        disturbances=(Disturbance(target=0, kind=DisturbanceKind.PULSE, amplitude=-4.0, t_start=0.0, t_end=2.0),),
        ic=InitialConditionSpec(dp_halfwidth=0.0, dv_halfwidth=0.0), controller=cp_params,
        limits=Limits(a_max=4.0, v_max=36.0, v_min=0.0),
    )
    log = simulate(scenario)
    speeds = log.absolute_speeds()
    assert speeds.min() >= -1e-9
    assert speeds[:, 0].min() == pytest.approx(0.0, abs=1e-9)


@pytest.mark.slow
@pytest.mark.parametrize("params_name", ["cp_params", "vp_params"])
def test_random_initial_conditions_converge(request, params_name, quiet):
    params = request.getfixturevalue(params_name)
    log = simulate(quiet(params, n_vehicles=31, t_end=60.0, seed=0))
    chi_norms = np.hypot(log.dp + log.scenario.eq.dp_bar, log.dv)
    assert np.all(chi_norms[1000] < 0.05)     # t = 10 s
    assert np.all(chi_norms[-1] < 1e-3)       # t = 60 s


def test_variable_policy_keeps_shifted_spacing_downstream(cp_params, vp_params, unsaturated):
    def step_response(params):
        scenario = Scenario(
            n_vehicles=10, dt=0.01, t_end=10.0, speed_schedule=((0.0, 14.0), (1.0, 14.5)), disturbances=(),
            ic=InitialConditionSpec(dp_halfwidth=0.0, dv_halfwidth=0.0), controller=params, limits=unsaturated,
        )
        return attenuation_profile(simulate(scenario), window=(0.0, 10.0))

    variable, constant = step_response(vp_params), step_response(cp_params)
    assert np.max(variable.peak_spacing) <= 1e-9
    assert np.max(constant.peak_spacing) > 1e-6
    assert np.all(variable.peak_spacing <= constant.peak_spacing)


@pytest.mark.slow
def test_sinusoid_phase_attenuates_along_platoon(reference_log):
    profile = attenuation_profile(reference_log(Policy.CONSTANT), window=(35.0, 60.0))
    assert profile.vehicles[0] == 2
    assert profile.peak_dv[-1] < profile.peak_dv[0]
    assert profile.attenuates


@pytest.fixture
def pulse_log(cp_params):
    """One follower behind vehicle 0, which is pushed by an unbroadcast 2 m/s^2 pulse on [5, 10)."""
    return simulate(Scenario(
        n_vehicles=2, dt=0.01, t_end=15.0, speed_schedule=((0.0, 14.0),),
        disturbances=(Disturbance(target=0, kind=DisturbanceKind.PULSE, amplitude=2.0, t_start=5.0, t_end=10.0),),
        ic=InitialConditionSpec(dp_halfwidth=0.0, dv_halfwidth=0.0), controller=cp_params,
    ))


def test_follower_of_disturbed_vehicle_misses_its_gap_only_during_the_pulse(pulse_log, eq):
    t = pulse_log.t
    gap_error = pulse_log.dp[:, 1] + eq.dp_bar
    assert np.max(np.abs(gap_error[t < 5.0])) <= 1e-12
    # steady offset -1 / (1 + k_dp k_dv) per unit of unannounced acceleration
    np.testing.assert_allclose(gap_error[(t >= 9.0) & (t < 10.0)], -2.0 / 3.0, atol=0.01)
    assert np.max(np.abs(gap_error[t >= 14.0])) < 0.01

    inside = (t >= 5.0) & (t < 10.0)
    np.testing.assert_allclose(pulse_log.u_app[inside, 0] - pulse_log.u_cmd[inside, 0], 2.0, atol=1e-12)
    np.testing.assert_allclose(pulse_log.u_app[~inside, 0], pulse_log.u_cmd[~inside, 0], atol=1e-12)


def test_single_pair_reconverges_to_matched_speed_after_pulse(pulse_log):
    t = pulse_log.t
    assert np.max(np.abs(pulse_log.dv[(t >= 5.0) & (t < 10.0), 1])) > 0.1
    assert np.max(np.abs(pulse_log.dv[t >= 14.0, 1])) < 0.01


@pytest.mark.slow
@pytest.mark.parametrize("policy", [Policy.CONSTANT, Policy.VARIABLE])
def test_reference_runs_keep_gaps_positive_and_accelerations_saturated(reference_log, policy):
    log = reference_log(policy)
    assert log.t.shape == (6001,)
    assert np.min(log.gaps()) > 0.0
    assert np.max(np.abs(log.u_app)) <= log.scenario.limits.a_max + 1e-9


@pytest.mark.slow
def test_variable_policy_tail_excursions_exceed_constant_policy_on_reference_runs(reference_log):
    constant = attenuation_profile(reference_log(Policy.CONSTANT), window=(35.0, 60.0))
    variable = attenuation_profile(reference_log(Policy.VARIABLE), window=(35.0, 60.0))
    tail = slice(-5, None)
    assert np.all(variable.peak_gap[tail] > constant.peak_gap[tail])
    assert np.all(variable.peak_spacing[tail] > constant.peak_spacing[tail])
    # after the 45 s leader step the variable-spacing tail runs up to the speed bound
    speeds = reference_log(Policy.VARIABLE).absolute_speeds()
    assert np.max(speeds[:, -1]) > 35.0
