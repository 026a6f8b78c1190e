"""Data models for the platoon simulation toolkit."""

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np

from .config import DIVERGENCE_LIMIT
from .errors import ConfigurationError, DomainError


def _require_finite(**values: float) -> None:
    for name, value in values.items():
        if not math.isfinite(value):
            raise DomainError(f"{name} must be finite, got {value!r}")


class Policy(str, Enum):
    """Spacing policy selector."""
    CONSTANT = "constant"
    VARIABLE = "variable"

    @property
    def rho_dim(self) -> int:
        """Dimension of the per-vehicle filter state."""
        return 1 if self is Policy.CONSTANT else 2


@dataclass(frozen=True)
class VehicleState:
    """Absolute position and speed of one vehicle."""
    p: float
    v: float

    def __post_init__(self):
        _require_finite(p=self.p, v=self.v)


@dataclass(frozen=True)
class CarFollowingState:
    """Relative position and speed of a follower with respect to its predecessor."""
    dp: float
    dv: float

    def __post_init__(self):
        _require_finite(dp=self.dp, dv=self.dv)

    @property
    def gap(self) -> float:
        """Bumper-free distance to the predecessor (positive when behind it)."""
        return -self.dp


@dataclass(frozen=True)
class ExtendedPairState:
    """Pair state together with the controller's filter state."""
    chi: CarFollowingState
    rho: Tuple[float, ...] = (0.0,)

    def __post_init__(self):
        if len(self.rho) not in (1, 2):
            raise ConfigurationError(f"filter state must have 1 or 2 entries, got {len(self.rho)}")

    def check_policy(self, policy: Policy) -> None:
        if len(self.rho) != policy.rho_dim:
            raise ConfigurationError(
                f"{policy.value} policy needs a filter state of size {policy.rho_dim}, got {len(self.rho)}"
            )


@dataclass(frozen=True)
class EquilibriumSpec:
    """Desired gap and leader cruise speed."""
    dp_bar: float = 20.0
    v_bar: float = 14.0

    def __post_init__(self):
        _require_finite(dp_bar=self.dp_bar, v_bar=self.v_bar)
        if self.dp_bar <= 0:
            raise DomainError(f"dp_bar must be positive, got {self.dp_bar}")
        if self.v_bar <= 0:
            raise DomainError(f"v_bar must be positive, got {self.v_bar}")

    @property
    def chi_bar(self) -> CarFollowingState:
        return CarFollowingState(dp=-self.dp_bar, dv=0.0)


@dataclass
class PlatoonState:
    """Pairs 0..N, the virtual leader, and optionally the reconstructed absolute states."""
    pairs: List[ExtendedPairState]
    leader: VehicleState
    absolute: Optional[List[VehicleState]] = None

    @property
    def n_vehicles(self) -> int:
        return len(self.pairs)


@dataclass(frozen=True)
class Limits:
    """Actuation and speed bounds."""
    a_max: float = 4.0
    v_max: float = 36.0
    v_min: float = 0.0

    def __post_init__(self):
        if not self.a_max > 0:
            raise DomainError(f"a_max must be positive, got {self.a_max}")
        if not 0 <= self.v_min < self.v_max:
            raise DomainError(f"speed bounds must satisfy 0 <= v_min < v_max, got [{self.v_min}, {self.v_max}]")


@dataclass(frozen=True)
class AggregateStats:
    """Population means and variances over pairs 0..i."""
    mu_dp: float
    var_dp: float
    mu_dv: float
    var_dv: float
    count: int


@dataclass(frozen=True)
class PsiPair:
    """Values of the distance and speed-error macroscopic functions."""
    psi_dp: float = 0.0
    psi_dv: float = 0.0


@dataclass(frozen=True)
class RhoParams:
    """Filter poles and the weights of the macroscopic inputs."""
    lambda_diag: Tuple[float, ...] = (1.5,)
    a: float = 0.5
    b: float = 0.5
    gamma_dp: float = 0.5
    gamma_dv: float = 0.5

    def __post_init__(self):
        if len(self.lambda_diag) not in (1, 2):
            raise ConfigurationError(f"lambda must have 1 or 2 entries, got {len(self.lambda_diag)}")
        if any(not lam > 0 for lam in self.lambda_diag):
            raise DomainError(f"filter poles must be positive, got {self.lambda_diag}")
        if self.a < 0 or self.b < 0:
            raise DomainError(f"weights a, b must be non-negative, got a={self.a}, b={self.b}")
        if not (self.gamma_dp > 0 and self.gamma_dv > 0):
            raise DomainError(f"gamma values must be positive, got {self.gamma_dp}, {self.gamma_dv}")

    @property
    def d(self) -> float:
        """Interconnection gain a*gamma_dp + b*gamma_dv."""
        return self.a * self.gamma_dp + self.b * self.gamma_dv

    def drive(self, psi: PsiPair) -> float:
        return self.a * psi.psi_dp + self.b * psi.psi_dv


@dataclass(frozen=True)
class ControllerParams:
    """Gains shared by every vehicle of the platoon."""
    policy: Policy = Policy.CONSTANT
    k_dp: float = 1.0
    k_dv: float = 2.0
    rho: RhoParams = field(default_factory=RhoParams)
    upsilon: float = 0.9

    def __post_init__(self):
        if not (self.k_dp > 0 and self.k_dv > 0):
            raise DomainError(f"gains must be positive, got k_dp={self.k_dp}, k_dv={self.k_dv}")
        if not self.upsilon > 0:
            raise DomainError(f"upsilon must be positive, got {self.upsilon}")
        if len(self.rho.lambda_diag) != self.policy.rho_dim:
            raise ConfigurationError(
                f"{self.policy.value} policy needs {self.policy.rho_dim} filter pole(s), "
                f"got {len(self.rho.lambda_diag)}"
            )

    @classmethod
    def constant_reference(cls) -> "ControllerParams":
        """Constant-spacing parameter set used in the reference experiment."""
        return cls(
            policy=Policy.CONSTANT, k_dp=1.0, k_dv=2.0,
            rho=RhoParams(lambda_diag=(1.5,), a=0.5, b=0.5, gamma_dp=0.5, gamma_dv=0.5),
            upsilon=0.9,
        )

    @classmethod
    def variable_reference(cls) -> "ControllerParams":
        """Variable-spacing parameter set used in the reference experiment."""
        return cls(
            policy=Policy.VARIABLE, k_dp=1.0, k_dv=2.0,
            rho=RhoParams(lambda_diag=(1.5, 1.5), a=1.0, b=0.2, gamma_dp=0.5, gamma_dv=0.5),
            upsilon=0.9,
        )


@dataclass(frozen=True)
class ControlDecision:
    """Commanded acceleration and the references it tracks."""
    u_cmd: float
    dp_ref: float
    dv_ref: float


class DisturbanceKind(str, Enum):
    PULSE = "pulse"
    SINUSOID = "sinusoid"


@dataclass(frozen=True)
class Disturbance:
    """Additive acceleration disturbance on one vehicle, active on [t_start, t_end)."""
    target: int
    kind: DisturbanceKind
    amplitude: float
    t_start: float
    t_end: float
    frequency: float = 0.0

    def __post_init__(self):
        _require_finite(amplitude=self.amplitude, frequency=self.frequency)
        if self.target < 0:
            raise ConfigurationError(f"disturbance target must be a vehicle index, got {self.target}")
        if not self.t_start < self.t_end:
            raise ConfigurationError(f"disturbance window must satisfy t_start < t_end, got [{self.t_start}, {self.t_end})")

    def value(self, t: float) -> float:
        if not self.t_start <= t < self.t_end:
            return 0.0
        if self.kind is DisturbanceKind.PULSE:
            return self.amplitude
        return self.amplitude * math.sin(self.frequency * (t - self.t_start))


@dataclass(frozen=True)
class InitialConditionSpec:
    """Seeded uniform draws around the equilibrium."""
    seed: int = 0
    dp_halfwidth: float = 2.0
    dv_halfwidth: float = 1.0
    head_only: bool = False

    def __post_init__(self):
        if self.dp_halfwidth < 0 or self.dv_halfwidth < 0:
            raise DomainError("initial-condition halfwidths must be non-negative")


REFERENCE_SPEED_SCHEDULE: Tuple[Tuple[float, float], ...] = (
    (0.0, 14.0),
    (10.0, 25.0),
    (20.0, 20.0),
    (35.0, 14.0),
    (45.0, 25.0),
)

REFERENCE_DISTURBANCES: Tuple[Disturbance, ...] = (
    Disturbance(target=0, kind=DisturbanceKind.PULSE, amplitude=4.0, t_start=25.0, t_end=30.0),
    Disturbance(target=0, kind=DisturbanceKind.SINUSOID, amplitude=2.0, t_start=35.0, t_end=60.0, frequency=1.0),
)


@dataclass(frozen=True)
class Scenario:
    """Everything a single simulation run needs."""
    n_vehicles: int = 31
    dt: float = 0.01
    t_end: float = 60.0
    speed_schedule: Tuple[Tuple[float, float], ...] = REFERENCE_SPEED_SCHEDULE
    disturbances: Tuple[Disturbance, ...] = REFERENCE_DISTURBANCES
    ic: InitialConditionSpec = field(default_factory=InitialConditionSpec)
    limits: Limits = field(default_factory=Limits)
    controller: ControllerParams = field(default_factory=ControllerParams)
    eq: EquilibriumSpec = field(default_factory=EquilibriumSpec)
    divergence_limit: float = DIVERGENCE_LIMIT

    def __post_init__(self):
        if self.n_vehicles < 2:
            raise ConfigurationError(f"a platoon needs at least 2 vehicles, got {self.n_vehicles}")
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise DomainError(f"dt must be positive, got {self.dt}")
        if not self.t_end > 0:
            raise DomainError(f"t_end must be positive, got {self.t_end}")
        if not self.speed_schedule:
            raise ConfigurationError("speed schedule is empty")
        times = [t for t, _ in self.speed_schedule]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ConfigurationError(f"schedule times must be strictly increasing, got {times}")
        for disturbance in self.disturbances:
            if disturbance.target >= self.n_vehicles:
                raise ConfigurationError(
                    f"disturbance targets vehicle {disturbance.target} but the platoon has {self.n_vehicles}"
                )

    @property
    def n_steps(self) -> int:
        steps = int(round(self.t_end / self.dt))
        if abs(steps * self.dt - self.t_end) > 1e-9 * max(1.0, self.t_end):
            raise DomainError(f"t_end={self.t_end} is not a multiple of dt={self.dt}")
        return steps


@dataclass
class TrajectoryLog:
    """Sampled closed-loop trajectory; every array shares the time axis."""
    t: np.ndarray
    v_ref: np.ndarray
    leader_p: np.ndarray
    dp: np.ndarray
    dv: np.ndarray
    rho: np.ndarray
    u_cmd: np.ndarray
    u_app: np.ndarray
    psi_dp: np.ndarray
    psi_dv: np.ndarray
    scenario: Scenario

    @property
    def n_pairs(self) -> int:
        return self.dp.shape[1]

    @property
    def policy(self) -> Policy:
        return self.scenario.controller.policy

    def error_states(self) -> np.ndarray:
        """Error coordinates (dp + dp_bar, dv, rho...) with shape (T, n, 2 + r)."""
        e = self.dp + self.scenario.eq.dp_bar
        return np.concatenate([e[..., None], self.dv[..., None], self.rho], axis=-1)

    def error_norms(self) -> np.ndarray:
        return np.linalg.norm(self.error_states(), axis=-1)

    def spacing_errors(self) -> np.ndarray:
        """Deviation of each gap from the policy's own spacing reference."""
        e = self.dp + self.scenario.eq.dp_bar
        if self.policy is Policy.VARIABLE:
            return e + self.rho[..., 0]
        return e

    def absolute_positions(self) -> np.ndarray:
        return self.leader_p[:, None] + np.cumsum(self.dp, axis=1)

    def absolute_speeds(self) -> np.ndarray:
        return self.v_ref[:, None] + np.cumsum(self.dv, axis=1)

    def gaps(self) -> np.ndarray:
        return -self.dp


@dataclass(frozen=True)
class LyapunovConstants:
    """Sandwich, decrease and gain constants of a certificate."""
    policy: Policy
    alpha_lower: float
    alpha_upper: float
    alpha: float
    d: float
    upsilon: float
    gamma_tilde: float
    exact_alpha_lower: float
    exact_alpha_upper: float
    exact_alpha: float
    exact_gamma_tilde: float

    @property
    def certificate_valid(self) -> bool:
        return self.alpha > 0 and 0 < self.upsilon < 1 and 0 <= self.gamma_tilde < 1

    @property
    def exact_certificate_valid(self) -> bool:
        return self.exact_alpha > 0 and 0 < self.upsilon < 1 and 0 <= self.exact_gamma_tilde < 1

    @property
    def overshoot(self) -> float:
        """Amplitude of the class-KL surrogate, sqrt(alpha_upper / alpha_lower)."""
        return math.sqrt(self.alpha_upper / self.alpha_lower)


@dataclass(frozen=True)
class MatrixDiscrepancy:
    """Disagreement between a printed certificate matrix and the form it encodes."""
    matrix: str
    kind: str
    row: int
    col: int
    printed: float
    expected: float


@dataclass(frozen=True)
class IssViolation:
    sample: int
    vehicle: int
    t: float
    w_dot: float
    bound: float


@dataclass
class IssCheckReport:
    """Outcome of the conditional decrease check along a log.

    `violations` keeps the first examples only; `violation_count` is the total.
    """
    basis: str
    source: str
    checked: int
    violation_count: int = 0
    violations: List[IssViolation] = field(default_factory=list)
    domain_flags: List[str] = field(default_factory=list)

    @property
    def flag_count(self) -> int:
        return self.violation_count + len(self.domain_flags)

    @property
    def passed(self) -> bool:
        return self.flag_count == 0


@dataclass
class StringStabilityMetrics:
    """Per-run peak, terminal and bound statistics."""
    n_vehicles: int
    peaks: np.ndarray
    terminal: np.ndarray
    initial_max: float
    bound: float
    min_gap: float

    @property
    def platoon_peak(self) -> float:
        return float(np.max(self.peaks))

    @property
    def within_bound(self) -> bool:
        return self.platoon_peak <= self.bound + 1e-9

    @property
    def amplification(self) -> float:
        if self.initial_max == 0:
            return float("nan")
        return self.platoon_peak / self.initial_max


@dataclass
class ScalingVerdict:
    """Whether the platoon peak stays put as the platoon grows."""
    metrics: List[StringStabilityMetrics]
    spread: float
    tolerance: float

    @property
    def all_within_bound(self) -> bool:
        return all(m.within_bound for m in self.metrics)

    @property
    def length_independent(self) -> bool:
        return self.spread <= self.tolerance

    @property
    def passed(self) -> bool:
        return self.all_within_bound and self.length_independent


@dataclass
class AttenuationProfile:
    """Peak speed, gap and spacing-tracking errors per vehicle inside a time window.

    peak_gap is measured from the equilibrium gap; peak_spacing from the
    policy's own reference, which the variable policy shifts by rho1.
    """
    window: Tuple[float, float]
    vehicles: np.ndarray
    peak_dv: np.ndarray
    peak_spacing: np.ndarray
    peak_gap: np.ndarray

    @property
    def adjacent_decrease_fraction(self) -> float:
        if len(self.peak_dv) < 2:
            return float("nan")
        return float(np.mean(np.diff(self.peak_dv) < 0))

    @property
    def attenuates(self) -> Optional[bool]:
        """None when there is nothing to attenuate (fewer than two vehicles, or no motion)."""
        if len(self.peak_dv) < 2 or not np.any(self.peak_dv > 0):
            return None
        return bool(self.peak_dv[-1] < self.peak_dv[0])


@dataclass
class StabilityReport:
    """Everything the analysis of one run produces."""
    run: Dict[str, str]
    constants: LyapunovConstants
    discrepancies: List[MatrixDiscrepancy]
    iss: List[IssCheckReport]
    metrics: StringStabilityMetrics
    attenuation: Optional[AttenuationProfile] = None
