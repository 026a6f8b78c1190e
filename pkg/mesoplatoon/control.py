"""Mesoscopic control laws for the constant and variable spacing policies.

Both laws are stateless maps from the local pair state, the vehicle's filter
state and the predecessor's communicated acceleration to a commanded
acceleration.  The filter state is integrated by the simulation engine.

Error coordinates used throughout: e = dp + dp_bar (zero at the desired gap),
dv, and the filter state; for the variable policy the spacing reference is
shifted by the first filter component.
"""

import logging
from typing import Sequence, Tuple, Union

import numpy as np

from .errors import ConfigurationError, DomainError
from .models import (
    CarFollowingState,
    ControlDecision,
    ControllerParams,
    EquilibriumSpec,
    Policy,
    PsiPair,
)

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]


def _rho_array(rho: Union[float, Sequence[float], np.ndarray], policy: Policy) -> np.ndarray:
    rho = np.atleast_1d(np.asarray(rho, dtype=float))
    if rho.shape[-1] != policy.rho_dim:
        raise ConfigurationError(
            f"{policy.value} policy needs a filter state of size {policy.rho_dim}, got {rho.shape[-1]}"
        )
    return rho


def spacing_reference(policy: Policy, eq: EquilibriumSpec, rho: Union[float, Sequence[float]]) -> float:
    """Desired relative position dp^r."""
    rho = _rho_array(rho, policy)
    if policy is Policy.CONSTANT:
        return -eq.dp_bar
    return -eq.dp_bar - float(rho[0])


def relative_command(policy: Policy, e: ArrayLike, dv: ArrayLike, rho: np.ndarray, drive: ArrayLike,
                     params: ControllerParams) -> Tuple[ArrayLike, ArrayLike]:
    """u_i - u_{i-1} and the speed reference, elementwise over arrays.

    `rho` has shape (..., r) and `drive` is a*psi_dp + b*psi_dv of the
    predecessors; the constant policy ignores `drive` (it reaches the law only
    through rho).
    """
    k_dp, k_dv = params.k_dp, params.k_dv
    if policy is Policy.CONSTANT:
        dv_ref = -k_dp * e
        dv_ref_dot = -k_dp * dv
        return dv_ref_dot - k_dv * (dv - dv_ref) - e - rho[..., 0], dv_ref

    lam1, lam2 = params.rho.lambda_diag
    rho1, rho2 = rho[..., 0], rho[..., 1]
    e_p = e + rho1
    dv_ref = lam1 * rho1 - rho2 - k_dp * e_p
    local = (
        -e_p
        - k_dv * (dv - dv_ref)
        + (k_dp - lam1) * (lam1 * rho1 - rho2)
        + lam2 * rho2
        - k_dp * dv
        - drive
    )
    return local, dv_ref


def _check_policy(params: ControllerParams, policy: Policy) -> None:
    if params.policy is not policy:
        raise ConfigurationError(f"parameters are for the {params.policy.value} policy, not {policy.value}")


def _check_finite(*values: float) -> None:
    if not np.all(np.isfinite(values)):
        raise DomainError(f"control inputs must be finite, got {values}")


def control_cp(chi: CarFollowingState, rho: float, u_leader: float, params: ControllerParams,
               eq: EquilibriumSpec) -> ControlDecision:
    """Constant-spacing law."""
    _check_policy(params, Policy.CONSTANT)
    _check_finite(rho, u_leader)
    rho_vec = _rho_array(rho, Policy.CONSTANT)
    local, dv_ref = relative_command(Policy.CONSTANT, chi.dp + eq.dp_bar, chi.dv, rho_vec, 0.0, params)
    return ControlDecision(u_cmd=float(u_leader + local), dp_ref=-eq.dp_bar, dv_ref=float(dv_ref))


def control_vp(chi: CarFollowingState, rho: Sequence[float], psi_prev: PsiPair, u_leader: float,
               params: ControllerParams, eq: EquilibriumSpec) -> ControlDecision:
    """Variable-spacing law; psi_prev is the macroscopic input over the predecessors."""
    _check_policy(params, Policy.VARIABLE)
    rho_vec = _rho_array(rho, Policy.VARIABLE)
    _check_finite(*rho_vec, u_leader, psi_prev.psi_dp, psi_prev.psi_dv)
    local, dv_ref = relative_command(
        Policy.VARIABLE, chi.dp + eq.dp_bar, chi.dv, rho_vec, params.rho.drive(psi_prev), params
    )
    return ControlDecision(
        u_cmd=float(u_leader + local),
        dp_ref=spacing_reference(Policy.VARIABLE, eq, rho_vec),
        dv_ref=float(dv_ref),
    )


def error_field(policy: Policy, x: np.ndarray, drive: ArrayLike, params: ControllerParams) -> np.ndarray:
    """Closed-loop derivative of error states x = (e, dv, rho...) of shape (..., 2 + r).

    Assumes the follower's feedforward matches the predecessor's applied
    acceleration, so d(dv)/dt equals the relative command.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != 2 + policy.rho_dim:
        raise ConfigurationError(f"{policy.value} error state needs {2 + policy.rho_dim} entries, got {x.shape[-1]}")
    e, dv, rho = x[..., 0], x[..., 1], x[..., 2:]
    local, _ = relative_command(policy, e, dv, rho, drive, params)
    lam = params.rho.lambda_diag
    if policy is Policy.CONSTANT:
        rho_dot = [-lam[0] * rho[..., 0] + drive]
    else:
        rho_dot = [-lam[0] * rho[..., 0] + rho[..., 1], -lam[1] * rho[..., 1] + drive]
    return np.stack([dv, local] + [np.broadcast_to(r, np.shape(dv)) for r in rho_dot], axis=-1)


def closed_loop_error_derivative(policy: Policy, tilde_chi: Sequence[float], psi_prev: PsiPair,
                                 params: ControllerParams) -> np.ndarray:
    """f_cl(x) + g_cl(psi) for one vehicle in error coordinates."""
    _check_policy(params, policy)
    return error_field(policy, np.asarray(tilde_chi, dtype=float), params.rho.drive(psi_prev), params)


def interconnection_term(policy: Policy, psi_prev: PsiPair, params: ControllerParams) -> np.ndarray:
    """g_cl: how the macroscopic input enters the error dynamics."""
    drive = params.rho.drive(psi_prev)
    if policy is Policy.CONSTANT:
        return np.array([0.0, 0.0, drive])
    return np.array([0.0, -drive, 0.0, drive])
