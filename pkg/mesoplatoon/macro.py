"""Macroscopic aggregates of the upstream platoon and the filter they drive.

For vehicle i the controller sees population means and variances of the pair
states of vehicles 0..i-1, squashed into two signed dispersion signals:

    psi_dp = gamma_dp * sign(dp_bar + mean(dp)) * std(dp)
    psi_dv = gamma_dv * sign(mean(dv)) * std(dv)

Those feed a stable linear filter rho (one pole for the constant policy, a
two-state cascade for the variable policy).  Vehicle 0 has no predecessors and
receives zero.

Besides the scalar operations this module offers `prefix_psi`, which evaluates
every prefix at once over arbitrary leading batch dimensions; the engine uses
it per step and the analysis layer uses it over whole logs.
"""

import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, DomainError
from .models import AggregateStats, CarFollowingState, EquilibriumSpec, PsiPair, RhoParams

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BoundViolation:
    """A sample where a psi bound does not hold."""
    sample: int
    index: int
    quantity: str
    bound: str
    value: float
    limit: float


def aggregate_stats(pairs: Sequence[CarFollowingState]) -> AggregateStats:
    """Population mean and variance of dp and dv over the given pairs."""
    if len(pairs) == 0:
        raise DomainError("aggregate_stats needs at least one pair")
    dp = np.array([pair.dp for pair in pairs], dtype=float)
    dv = np.array([pair.dv for pair in pairs], dtype=float)
    # np.var subtracts the mean before squaring
    return AggregateStats(
        mu_dp=float(np.mean(dp)),
        var_dp=float(np.var(dp)),
        mu_dv=float(np.mean(dv)),
        var_dv=float(np.var(dv)),
        count=len(pairs),
    )


def psi(stats: AggregateStats, eq: EquilibriumSpec, params: RhoParams) -> PsiPair:
    return PsiPair(
        psi_dp=float(params.gamma_dp * np.sign(eq.dp_bar + stats.mu_dp) * np.sqrt(stats.var_dp)),
        psi_dv=float(params.gamma_dv * np.sign(stats.mu_dv) * np.sqrt(stats.var_dv)),
    )


def psi_for_vehicle(pairs: Sequence[CarFollowingState], i: int, eq: EquilibriumSpec, params: RhoParams) -> PsiPair:
    """Macroscopic input of vehicle i, computed over pairs 0..i-1."""
    if i == 0:
        return PsiPair()
    return psi(aggregate_stats(pairs[:i]), eq, params)


def _prefix_moments(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Mean and population variance of x[..., :k+1] for every k."""
    n = x.shape[-1]
    counts = np.arange(1, n + 1, dtype=float)
    mask = np.tril(np.ones((n, n), dtype=bool))
    mean = np.sum(np.where(mask, x[..., None, :], 0.0), axis=-1) / counts
    deviation = np.where(mask, x[..., None, :] - mean[..., :, None], 0.0)
    var = np.sum(deviation * deviation, axis=-1) / counts
    return mean, var


def prefix_psi(dp: np.ndarray, dv: np.ndarray, eq: EquilibriumSpec, params: RhoParams) -> Tuple[np.ndarray, np.ndarray]:
    """psi over pairs 0..k for every k, vectorised over leading dimensions."""
    mu_dp, var_dp = _prefix_moments(np.asarray(dp, dtype=float))
    mu_dv, var_dv = _prefix_moments(np.asarray(dv, dtype=float))
    psi_dp = params.gamma_dp * np.sign(eq.dp_bar + mu_dp) * np.sqrt(var_dp)
    psi_dv = params.gamma_dv * np.sign(mu_dv) * np.sqrt(var_dv)
    return psi_dp, psi_dv


def predecessor_psi(dp: np.ndarray, dv: np.ndarray, eq: EquilibriumSpec, params: RhoParams) -> Tuple[np.ndarray, np.ndarray]:
    """Input psi of every vehicle: the prefix over pairs 0..i-1, zero for vehicle 0."""
    psi_dp, psi_dv = prefix_psi(dp, dv, eq, params)
    pad = [(0, 0)] * (psi_dp.ndim - 1) + [(1, 0)]
    return np.pad(psi_dp[..., :-1], pad), np.pad(psi_dv[..., :-1], pad)


def filter_derivative(rho: np.ndarray, drive: np.ndarray, params: RhoParams) -> np.ndarray:
    """Filter dynamics for states of shape (..., r) and drive a*psi_dp + b*psi_dv of shape (...)."""
    lam = params.lambda_diag
    if rho.shape[-1] != len(lam):
        raise ConfigurationError(f"filter state has {rho.shape[-1]} entries but {len(lam)} pole(s) are configured")
    if len(lam) == 1:
        return (-lam[0] * rho[..., 0] + drive)[..., None]
    return np.stack([
        -lam[0] * rho[..., 0] + rho[..., 1],
        -lam[1] * rho[..., 1] + drive,
    ], axis=-1)


def rho_derivative_cp(rho: float, psi_prev: PsiPair, params: RhoParams) -> float:
    if len(params.lambda_diag) != 1:
        raise ConfigurationError(f"constant policy filter needs one pole, got {len(params.lambda_diag)}")
    return float(filter_derivative(np.array([rho], dtype=float), np.float64(params.drive(psi_prev)), params)[0])


def rho_derivative_vp(rho: Sequence[float], psi_prev: PsiPair, params: RhoParams) -> np.ndarray:
    if len(params.lambda_diag) != 2 or len(rho) != 2:
        raise ConfigurationError("variable policy filter needs two poles and a two-entry state")
    return filter_derivative(np.asarray(rho, dtype=float), np.float64(params.drive(psi_prev)), params)


def filter_gain_bound(params: RhoParams) -> np.ndarray:
    """Steady-state bound on |rho| per unit of sup(|psi|): row sums of |Lambda^-1 G|."""
    lam = params.lambda_diag
    if len(lam) == 1:
        system = np.array([[-lam[0]]])
        drive = np.array([[params.a, params.b]])
    else:
        system = np.array([[-lam[0], 1.0], [0.0, -lam[1]]])
        drive = np.array([[0.0, 0.0], [params.a, params.b]])
    return np.sum(np.abs(np.linalg.solve(system, drive)), axis=1)


def check_variance_property(values: Sequence[float]) -> bool:
    """Population variance never exceeds a quarter of the squared range."""
    x = np.asarray(values, dtype=float)
    if x.size == 0 or not np.all(np.isfinite(x)):
        raise DomainError("check_variance_property needs a non-empty finite list")
    spread = float(np.max(x) - np.min(x))
    return float(np.var(x)) <= 0.25 * spread * spread * (1 + 1e-12)


def _history_arrays(history: Sequence[Sequence[CarFollowingState]]) -> Tuple[np.ndarray, np.ndarray]:
    dp = np.array([[pair.dp for pair in sample] for sample in history], dtype=float)
    dv = np.array([[pair.dv for pair in sample] for sample in history], dtype=float)
    return dp, dv


def check_lemma2_bounds(history: Sequence[Sequence[CarFollowingState]], params: RhoParams,
                        eq: EquilibriumSpec, tol: float = 1e-12) -> List[BoundViolation]:
    """Max and sum bounds on |psi| over every prefix of every sample."""
    if len(history) == 0:
        return []
    dp, dv = _history_arrays(history)
    psi_dp, psi_dv = prefix_psi(dp, dv, eq, params)
    counts = np.arange(1, dp.shape[1] + 1, dtype=float)
    violations: List[BoundViolation] = []
    for name, values, deviation, gamma in (
        ("dp", psi_dp, np.abs(dp + eq.dp_bar), params.gamma_dp),
        ("dv", psi_dv, np.abs(dv), params.gamma_dv),
    ):
        max_bound = gamma * np.maximum.accumulate(deviation, axis=1)
        sum_bound = gamma / np.sqrt(counts) * np.cumsum(deviation, axis=1)
        for bound_name, bound in (("max", max_bound), ("sum", sum_bound)):
            bad = np.abs(values) > bound + tol * (1.0 + bound)
            for sample, index in zip(*np.nonzero(bad)):
                violations.append(BoundViolation(
                    sample=int(sample), index=int(index), quantity=name, bound=bound_name,
                    value=float(values[sample, index]), limit=float(bound[sample, index]),
                ))
    if violations:
        logger.warning(f"{len(violations)} psi bound violations found")
    return violations


def check_lemma1_composition(history: Sequence[Sequence[CarFollowingState]], params: RhoParams,
                             eq: EquilibriumSpec, tol: float = 1e-12) -> List[BoundViolation]:
    """a*psi_dp + b*psi_dv against d * max_j |error_j| over every prefix."""
    if len(history) == 0:
        return []
    dp, dv = _history_arrays(history)
    psi_dp, psi_dv = prefix_psi(dp, dv, eq, params)
    drive = params.a * psi_dp + params.b * psi_dv
    bound = params.d * np.maximum.accumulate(np.hypot(dp + eq.dp_bar, dv), axis=1)
    bad = np.abs(drive) > bound + tol * (1.0 + bound)
    return [
        BoundViolation(sample=int(s), index=int(i), quantity="drive", bound="composition",
                       value=float(drive[s, i]), limit=float(bound[s, i]))
        for s, i in zip(*np.nonzero(bad))
    ]
