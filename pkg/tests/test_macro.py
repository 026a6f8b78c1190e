import numpy as np
import pytest

from mesoplatoon.errors import ConfigurationError, DomainError
from mesoplatoon.macro import (
    aggregate_stats,
    check_lemma1_composition,
    check_lemma2_bounds,
    check_variance_property,
    filter_derivative,
    filter_gain_bound,
    predecessor_psi,
    prefix_psi,
    psi,
    psi_for_vehicle,
    rho_derivative_cp,
    rho_derivative_vp,
)
from mesoplatoon.models import CarFollowingState, PsiPair, RhoParams


def pairs(dp, dv):
    return [CarFollowingState(dp=a, dv=b) for a, b in zip(dp, dv)]


def random_history(seed, samples=50, n=12):
    rng = np.random.default_rng(seed)
    return [
        pairs(-20.0 + rng.uniform(-3, 3, n), rng.uniform(-2, 2, n))
        for _ in range(samples)
    ]


def test_aggregate_stats_are_population_moments():
    stats = aggregate_stats(pairs([-18.0, -20.0, -22.0, -24.0], [1.0, 1.0, 3.0, 3.0]))
    assert stats.mu_dp == pytest.approx(-21.0)
    assert stats.var_dp == pytest.approx(5.0)
    assert stats.mu_dv == pytest.approx(2.0)
    assert stats.var_dv == pytest.approx(1.0)
    assert stats.count == 4


def test_aggregate_stats_of_empty_set_is_an_error():
    with pytest.raises(DomainError):
        aggregate_stats([])


def test_psi_is_signed_standard_deviation(eq):
    value = psi(aggregate_stats(pairs([-18.0, -20.0], [1.0, 2.0])), eq, RhoParams())
    assert value.psi_dp == pytest.approx(0.5)    # 0.5 * sign(+1) * 1
    assert value.psi_dv == pytest.approx(0.25)   # 0.5 * sign(1.5) * 0.5


def test_psi_vanishes_when_means_sit_at_equilibrium(eq):
    value = psi(aggregate_stats(pairs([-18.0, -22.0], [1.0, -1.0])), eq, RhoParams())
    assert value == PsiPair(0.0, 0.0)


def test_negative_mean_flips_the_sign(eq):
    value = psi(aggregate_stats(pairs([-21.0, -23.0], [-1.0, -3.0])), eq, RhoParams())
    assert value.psi_dp == pytest.approx(-0.5)
    assert value.psi_dv == pytest.approx(-0.5)


def test_first_vehicle_receives_zero(eq):
    assert psi_for_vehicle(pairs([-25.0, -15.0], [4.0, -4.0]), 0, eq, RhoParams()) == PsiPair()


def test_prefix_psi_matches_scalar_operations(eq):
    history = random_history(seed=3, samples=1)[0]
    dp = np.array([p.dp for p in history])
    dv = np.array([p.dv for p in history])
    psi_dp, psi_dv = predecessor_psi(dp, dv, eq, RhoParams())
    for i in range(len(history)):
        expected = psi_for_vehicle(history, i, eq, RhoParams())
        assert psi_dp[i] == pytest.approx(expected.psi_dp, abs=1e-12)
        assert psi_dv[i] == pytest.approx(expected.psi_dv, abs=1e-12)


def test_prefix_psi_supports_batch_dimensions(eq):
    rng = np.random.default_rng(1)
    dp = -20.0 + rng.uniform(-2, 2, size=(4, 3, 7))
    dv = rng.uniform(-1, 1, size=(4, 3, 7))
    batched_dp, batched_dv = prefix_psi(dp, dv, eq, RhoParams())
    assert batched_dp.shape == (4, 3, 7)
    single_dp, single_dv = prefix_psi(dp[2, 1], dv[2, 1], eq, RhoParams())
    np.testing.assert_allclose(batched_dp[2, 1], single_dp)
    np.testing.assert_allclose(batched_dv[2, 1], single_dv)


@pytest.mark.parametrize("values", [[0.0, 1.0], [3.0, 3.0, 3.0], [-2.0, 5.0, 1.0, 0.5], list(np.linspace(-1, 1, 11))])
def test_variance_never_exceeds_quarter_squared_range(values):
    assert check_variance_property(values)


def test_variance_property_rejects_empty_input():
    with pytest.raises(DomainError):
        check_variance_property([])


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_psi_bounds_hold_on_random_histories(eq, seed):
    params = RhoParams(gamma_dp=0.7, gamma_dv=0.3)
    assert check_lemma2_bounds(random_history(seed), params, eq) == []


@pytest.mark.parametrize("seed", [0, 1])
def test_drive_is_bounded_by_upstream_error(eq, seed):
    assert check_lemma1_composition(random_history(seed), RhoParams(a=1.0, b=0.2), eq) == []


def test_filter_derivative_constant_policy():
    params = RhoParams(lambda_diag=(1.5,))
    rho = np.array([[2.0], [0.0]])
    np.testing.assert_allclose(filter_derivative(rho, np.array([1.0, -1.0]), params), [[-2.0], [-1.0]])
    assert rho_derivative_cp(2.0, PsiPair(1.0, 1.0), params) == pytest.approx(-3.0 + 1.0)


def test_filter_derivative_variable_policy_is_a_cascade():
    params = RhoParams(lambda_diag=(1.5, 2.0), a=1.0, b=0.2)
    value = rho_derivative_vp([1.0, 2.0], PsiPair(1.0, 5.0), params)
    np.testing.assert_allclose(value, [-1.5 + 2.0, -4.0 + 2.0])


def test_filter_state_size_must_match_poles():
    with pytest.raises(ConfigurationError):
        filter_derivative(np.zeros((3, 2)), np.zeros(3), RhoParams(lambda_diag=(1.5,)))


def test_filter_gain_bound():
    np.testing.assert_allclose(filter_gain_bound(RhoParams()), [1.0 / 1.5])
    np.testing.assert_allclose(
        filter_gain_bound(RhoParams(lambda_diag=(1.5, 1.5), a=1.0, b=0.2)), [1.2 / 2.25, 1.2 / 1.5]
    )
