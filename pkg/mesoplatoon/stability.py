"""Lyapunov/ISS certificates and empirical string-stability analysis.

Two families of constants are computed for each policy:

* Printed constants, from the closed-form expressions attached to the
  upper-triangular certificate matrices (alpha_lower = 1/2, alpha_upper,
  alpha, d, gamma_tilde).  These reproduce the tabulated gains and drive the
  certificate verdict.
* Exact constants, from the symmetric matrices of the quadratic forms
  themselves: W(x) = 1/2 |T x|^2 and, with no macroscopic input,
  -dW/dt = x^T S x.  These bound the forms for every state and are the ones
  used when an inequality must hold pointwise.

The quadratic forms are written through a change of coordinates y = T x:

    constant policy:  y = (e, dv + k_dp e, rho)
    variable policy:  y = (s, dv - dv_ref, rho1, rho2),  s = e + rho1

in which -dW/dt is y^T D y with a block-diagonal D.

Typical usage:

    constants = lyapunov_constants(ControllerParams.constant_reference())
    log = simulate(scenario)
    report = build_report(log, run_info)
    summary = report_summary(report)
"""

import logging
import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import EIGEN_TOLERANCE, TRAJECTORY_TOLERANCE
from .control import error_field
from .errors import ConfigurationError, DomainError
from .models import (
    AttenuationProfile,
    ControllerParams,
    IssCheckReport,
    IssViolation,
    LyapunovConstants,
    MatrixDiscrepancy,
    Policy,
    ScalingVerdict,
    StabilityReport,
    StringStabilityMetrics,
    TrajectoryLog,
)
from .simulate import rk4_step

logger = logging.getLogger(__name__)

MAX_STORED_VIOLATIONS = 100


def _check_params(params: ControllerParams, policy: Policy) -> None:
    if params.policy is not policy:
        raise ConfigurationError(f"parameters are for the {params.policy.value} policy, not {policy.value}")
    if not (params.k_dp > 0 and params.k_dv > 0) or any(lam <= 0 for lam in params.rho.lambda_diag):
        raise DomainError("gains and filter poles must be positive")


def lyapunov_transform(params: ControllerParams) -> np.ndarray:
    """T such that W(x) = 1/2 |T x|^2."""
    k = params.k_dp
    if params.policy is Policy.CONSTANT:
        return np.array([
            [1.0, 0.0, 0.0],
            [k, 1.0, 0.0],
            [0.0, 0.0, 1.0],
        ])
    lam1 = params.rho.lambda_diag[0]
    return np.array([
        [1.0, 0.0, 1.0, 0.0],
        [k, 1.0, k - lam1, 1.0],
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ])


def _decay_form(params: ControllerParams) -> np.ndarray:
    """D with -dW/dt = y^T D y when psi is zero."""
    k, kv = params.k_dp, params.k_dv
    if params.policy is Policy.CONSTANT:
        lam = params.rho.lambda_diag[0]
        return np.array([
            [k, 0.0, 0.0],
            [0.0, kv, 0.5],
            [0.0, 0.5, lam],
        ])
    lam1, lam2 = params.rho.lambda_diag
    return np.array([
        [k, 0.0, 0.0, 0.0],
        [0.0, kv, 0.0, 0.0],
        [0.0, 0.0, lam1, -0.5],
        [0.0, 0.0, -0.5, lam2],
    ])


def lyapunov_hessian(params: ControllerParams) -> np.ndarray:
    transform = lyapunov_transform(params)
    return transform.T @ transform


def decay_matrix(params: ControllerParams) -> np.ndarray:
    """Symmetric S with -dW/dt = x^T S x along the isolated error dynamics."""
    transform = lyapunov_transform(params)
    return transform.T @ _decay_form(params) @ transform


def lyapunov_value(params: ControllerParams, x: np.ndarray) -> np.ndarray:
    y = np.asarray(x, dtype=float) @ lyapunov_transform(params).T
    return 0.5 * np.sum(y * y, axis=-1)


def lyapunov_gradient(params: ControllerParams, x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=float) @ lyapunov_hessian(params)


def _exact_constants(params: ControllerParams, d: float) -> Tuple[float, float, float, float]:
    sandwich = np.linalg.eigvalsh(lyapunov_hessian(params))
    decay = np.linalg.eigvalsh(decay_matrix(params))
    lower, upper, alpha = 0.5 * sandwich[0], 0.5 * sandwich[-1], decay[0]
    if alpha <= EIGEN_TOLERANCE:
        gamma = math.inf
    else:
        gamma = math.sqrt(upper / lower) * d / (alpha * params.upsilon)
    return float(lower), float(upper), float(alpha), float(gamma)


def _assemble(params: ControllerParams, alpha_upper: float, alpha: float) -> LyapunovConstants:
    alpha_lower = 0.5
    d = params.rho.d
    gamma_tilde = math.sqrt(alpha_upper / alpha_lower) * d / (alpha * params.upsilon)
    exact_lower, exact_upper, exact_alpha, exact_gamma = _exact_constants(params, d)
    constants = LyapunovConstants(
        policy=params.policy,
        alpha_lower=alpha_lower,
        alpha_upper=alpha_upper,
        alpha=alpha,
        d=d,
        upsilon=params.upsilon,
        gamma_tilde=gamma_tilde,
        exact_alpha_lower=exact_lower,
        exact_alpha_upper=exact_upper,
        exact_alpha=exact_alpha,
        exact_gamma_tilde=exact_gamma,
    )
    if not 0 < params.upsilon < 1:
        logger.warning(f"upsilon={params.upsilon} lies outside (0, 1); certificate domain violated")
    return constants


def constants_cp(params: ControllerParams) -> LyapunovConstants:
    _check_params(params, Policy.CONSTANT)
    k, kv = params.k_dp, params.k_dv
    lam = params.rho.lambda_diag[0]
    return _assemble(params, alpha_upper=(1 + k * k) / 2, alpha=min(kv, k * (1 + kv * k), lam))


def constants_vp(params: ControllerParams) -> LyapunovConstants:
    _check_params(params, Policy.VARIABLE)
    k, kv = params.k_dp, params.k_dv
    lam1, lam2 = params.rho.lambda_diag
    alpha_upper = 0.5 * max(1 + k * k, 2 + (lam1 - k) ** 2)
    alpha = min(k * (1 + k * kv), kv, k + lam1 + kv * (lam1 - k) ** 2, lam2 + kv)
    return _assemble(params, alpha_upper=alpha_upper, alpha=alpha)


def lyapunov_constants(params: ControllerParams) -> LyapunovConstants:
    if params.policy is Policy.CONSTANT:
        return constants_cp(params)
    return constants_vp(params)


def bound_coefficient(gamma_tilde: float) -> float:
    """Sum of the geometric series of the ISS gain, 1 / (1 - gamma_tilde)."""
    if not 0 <= gamma_tilde < 1:
        return math.inf
    return 1.0 / (1.0 - gamma_tilde)


def certificate_matrices(params: ControllerParams) -> Tuple[np.ndarray, np.ndarray]:
    """Upper-triangular P and Q in the printed layout."""
    k, kv = params.k_dp, params.k_dv
    if params.policy is Policy.CONSTANT:
        lam = params.rho.lambda_diag[0]
        p = np.array([
            [1 + k * k, 2 * k, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
        ])
        q = np.array([
            [k * (1 + kv * k), 2 * kv * k, k],
            [0.0, kv, 1.0],
            [0.0, 0.0, lam],
        ])
    else:
        lam1, lam2 = params.rho.lambda_diag
        p1, p2, p3 = 2 * k, 2 * (1 + k * k - lam1 * k), 2 * (k - lam1)
        p = np.array([
            [1 + k * k, p1, p2, p1],
            [0.0, 1.0, p3, 2.0],
            [0.0, 0.0, 2 + (lam1 - k) ** 2, p3],
            [0.0, 0.0, 0.0, 2.0],
        ])
        q1 = k * (1 + k * kv)
        q2 = 2 * k * (1 + kv * (k - lam1))
        q3 = 2 * kv * (k - lam1)
        q4 = k + lam1 + kv * (lam1 - k) ** 2
        q5 = 1 - 2 * kv * (k - lam1)
        q = np.array([
            [q1, 2 * k * kv, q2, 2 * k * kv],
            [0.0, kv, q3, 2 * kv],
            [0.0, 0.0, q4, q5],
            [0.0, 0.0, 0.0, lam2 + kv],
        ])

    for name, matrix in (("P", p), ("Q", q)):
        if np.any(np.diag(matrix) <= EIGEN_TOLERANCE):
            raise DomainError(f"{name} has a non-positive diagonal entry: {np.diag(matrix)}")
    constants = lyapunov_constants(params)
    if abs(np.min(np.diag(q)) - constants.alpha) > 1e-12:
        raise DomainError(f"alpha={constants.alpha} differs from min diag(Q)={np.min(np.diag(q))}")
    return p, q


def audit_certificate_matrices(params: ControllerParams, tol: float = 1e-9) -> List[MatrixDiscrepancy]:
    """Compare the printed matrices with the forms they are meant to encode."""
    p, q = certificate_matrices(params)
    discrepancies: List[MatrixDiscrepancy] = []
    for name, printed, expected in (("P", p, lyapunov_hessian(params)), ("Q", q, decay_matrix(params))):
        size = printed.shape[0]
        for row in range(size):
            for col in range(row, size):
                if row == col:
                    coeff, target = printed[row, row], expected[row, row]
                else:
                    coeff, target = printed[row, col] + printed[col, row], 2 * expected[row, col]
                if abs(coeff - target) > tol:
                    discrepancies.append(MatrixDiscrepancy(name, "form", row, col, float(coeff), float(target)))
        eigenvalues = np.linalg.eigvalsh(expected)
        claimed = np.diag(printed)
        if abs(claimed.min() - eigenvalues[0]) > tol:
            discrepancies.append(MatrixDiscrepancy(name, "spectrum-min", -1, -1, float(claimed.min()), float(eigenvalues[0])))
        if abs(claimed.max() - eigenvalues[-1]) > tol:
            discrepancies.append(MatrixDiscrepancy(name, "spectrum-max", -1, -1, float(claimed.max()), float(eigenvalues[-1])))
    for item in discrepancies:
        logger.debug(f"Certificate audit: {item}")
    return discrepancies


def isolated_system_matrix(params: ControllerParams) -> np.ndarray:
    """System matrix of one vehicle's error dynamics with no macroscopic input."""
    size = 2 + params.policy.rho_dim
    return np.column_stack([error_field(params.policy, column, 0.0, params) for column in np.eye(size)])


def isolated_decay(params: ControllerParams, x0: Sequence[float], t_end: float, dt: float = 0.01) -> Tuple[np.ndarray, np.ndarray]:
    """W along the isolated error dynamics from x0; returns (t, W)."""
    steps = int(round(t_end / dt))
    x = np.asarray(x0, dtype=float)
    values = np.empty(steps + 1)
    values[0] = lyapunov_value(params, x)
    field = lambda t, state: error_field(params.policy, state, 0.0, params)
    for k in range(steps):
        x = rk4_step(field, k * dt, x, dt)
        values[k + 1] = lyapunov_value(params, x)
    return np.arange(steps + 1) * dt, values


def _logged_relative_acceleration(log: TrajectoryLog) -> np.ndarray:
    u_app = log.u_app
    return u_app - np.concatenate([np.zeros((u_app.shape[0], 1)), u_app[:, :-1]], axis=1)


def iss_trajectory_check(log: TrajectoryLog, constants: LyapunovConstants, policy: Policy,
                         basis: str = "exact", source: str = "model",
                         tol: float = TRAJECTORY_TOLERANCE) -> IssCheckReport:
    """Conditional decrease of W_i wherever |x_i| dominates its predecessors.

    At each sample where |x_i| >= d / (alpha * upsilon) * max_{j<i} |x_j| the
    check asserts dW_i/dt <= -(1 - upsilon) * alpha * |x_i|^2 + tol.  The
    derivative is the nominal closed-loop field at the logged state
    (source="model") or the one built from the logged applied accelerations
    (source="plant").  Only exact/model certifies the control law; on disturbed
    or saturated runs the printed alpha and the plant derivative are expected
    to report violations.
    """
    if constants.policy is not policy or log.policy is not policy:
        raise ConfigurationError(
            f"policy mismatch: constants={constants.policy.value}, log={log.policy.value}, requested={policy.value}"
        )
    if basis not in ("exact", "printed"):
        raise ConfigurationError(f"unknown basis {basis!r}")
    if source not in ("model", "plant"):
        raise ConfigurationError(f"unknown derivative source {source!r}")

    params = log.scenario.controller
    alpha = constants.exact_alpha if basis == "exact" else constants.alpha
    upsilon = constants.upsilon
    report = IssCheckReport(basis=basis, source=source, checked=0)
    if not 0 < upsilon < 1:
        report.domain_flags.append(f"upsilon={upsilon:g} outside (0, 1)")
    if alpha <= 0:
        report.domain_flags.append(f"alpha={alpha:g} is not positive")
        return report

    x = log.error_states()
    norms = np.linalg.norm(x, axis=-1)
    upstream = np.zeros_like(norms)
    upstream[:, 1:] = np.maximum.accumulate(norms, axis=1)[:, :-1]
    drive = params.rho.a * log.psi_dp + params.rho.b * log.psi_dv

    derivative = error_field(policy, x, drive, params)
    if source == "plant":
        derivative[..., 1] = _logged_relative_acceleration(log)
    w_dot = np.sum(lyapunov_gradient(params, x) * derivative, axis=-1)

    region = norms >= constants.d / (alpha * upsilon) * upstream
    bound = -(1 - upsilon) * alpha * norms ** 2
    bad = region & (w_dot > bound + tol)
    report.checked = int(np.count_nonzero(region))
    report.violation_count = int(np.count_nonzero(bad))
    for sample, vehicle in list(zip(*np.nonzero(bad)))[:MAX_STORED_VIOLATIONS]:
        report.violations.append(IssViolation(
            sample=int(sample), vehicle=int(vehicle), t=float(log.t[sample]),
            w_dot=float(w_dot[sample, vehicle]), bound=float(bound[sample, vehicle]),
        ))
    logger.info(
        f"ISS check ({basis}/{source}): {report.checked} samples in region, "
        f"{report.violation_count} violations, {len(report.domain_flags)} domain flags"
    )
    return report


def run_metrics(log: TrajectoryLog, constants: Optional[LyapunovConstants] = None) -> StringStabilityMetrics:
    """Peaks, terminal errors and the geometric bound for one run."""
    if constants is None:
        constants = lyapunov_constants(log.scenario.controller)
    norms = log.error_norms()
    initial_max = float(np.max(norms[0]))
    if initial_max == 0:
        bound = 0.0
    else:
        bound = bound_coefficient(constants.gamma_tilde) * constants.overshoot * initial_max
    return StringStabilityMetrics(
        n_vehicles=log.n_pairs,
        peaks=np.max(norms, axis=0),
        terminal=norms[-1].copy(),
        initial_max=initial_max,
        bound=bound,
        min_gap=float(np.min(log.gaps())),
    )


def scaling_verdict(metrics: Sequence[StringStabilityMetrics], tolerance: float = 0.10) -> ScalingVerdict:
    """Relative spread of the platoon peak across runs of different length."""
    peaks = np.array([m.platoon_peak for m in metrics])
    spread = 0.0 if peaks.size == 0 or peaks.max() == 0 else float((peaks.max() - peaks.min()) / peaks.max())
    return ScalingVerdict(metrics=list(metrics), spread=spread, tolerance=tolerance)


def string_metrics(logs: Sequence[TrajectoryLog], tolerance: float = 0.10) -> ScalingVerdict:
    """Metrics for each log plus the length-independence verdict."""
    if not logs:
        raise ConfigurationError("string_metrics needs at least one log")
    reference = logs[0].scenario
    for log in logs[1:]:
        if log.scenario.controller != reference.controller or log.scenario.ic != reference.ic:
            raise ConfigurationError("logs were produced with different controller parameters or initial conditions")
    constants = lyapunov_constants(reference.controller)
    metrics = sorted((run_metrics(log, constants) for log in logs), key=lambda m: m.n_vehicles)
    verdict = scaling_verdict(metrics, tolerance)
    logger.info(f"String metrics over N+1 in {[m.n_vehicles for m in metrics]}: spread {verdict.spread:.3f}")
    return verdict


def attenuation_profile(log: TrajectoryLog, window: Tuple[float, float] = (35.0, 60.0),
                        first_vehicle: int = 2) -> AttenuationProfile:
    """Peak |dv|, spacing-tracking error and gap error per vehicle inside the window."""
    start, end = window
    slack = 1e-9 * max(1.0, abs(log.t[-1]))
    if not (log.t[0] - slack <= start < end <= log.t[-1] + slack):
        raise DomainError(f"window [{start}, {end}] is not inside the log [{log.t[0]}, {log.t[-1]}]")
    rows = (log.t >= start - slack) & (log.t <= end + slack)
    vehicles = np.arange(first_vehicle, log.n_pairs)

    def peaks(values: np.ndarray) -> np.ndarray:
        if not vehicles.size:
            return np.zeros(0)
        return np.max(np.abs(values[rows][:, vehicles]), axis=0)

    return AttenuationProfile(
        window=(float(start), float(end)),
        vehicles=vehicles,
        peak_dv=peaks(log.dv),
        peak_spacing=peaks(log.spacing_errors()),
        peak_gap=peaks(log.dp + log.scenario.eq.dp_bar),
    )


def build_report(log: TrajectoryLog, run: Dict[str, str],
                 window: Optional[Tuple[float, float]] = (35.0, 60.0), iss: bool = True) -> StabilityReport:
    """Constants, audit, ISS checks, metrics and attenuation for one run."""
    params = log.scenario.controller
    constants = lyapunov_constants(params)
    checks: List[IssCheckReport] = []
    if iss:
        for basis, source in (("exact", "model"), ("printed", "model"), ("exact", "plant")):
            checks.append(iss_trajectory_check(log, constants, params.policy, basis=basis, source=source))
    attenuation = None
    if window is not None:
        try:
            attenuation = attenuation_profile(log, window)
        except DomainError as e:
            logger.info(f"Attenuation profile skipped: {e}")
    return StabilityReport(
        run=dict(run),
        constants=constants,
        discrepancies=audit_certificate_matrices(params),
        iss=checks,
        metrics=run_metrics(log, constants),
        attenuation=attenuation,
    )


def _fmt(value: float) -> str:
    return f"{value:.10g}"


def _verdict(flag: Optional[bool]) -> str:
    if flag is None:
        return "n/a"
    return "PASS" if flag else "FAIL"


def report_summary(report: StabilityReport) -> Dict[str, str]:
    """Flat key/value view of a report."""
    c = report.constants
    summary = {f"run.{key}": value for key, value in report.run.items()}
    summary.update({
        "constants.policy": c.policy.value,
        "constants.alpha_lower": _fmt(c.alpha_lower),
        "constants.alpha_upper": _fmt(c.alpha_upper),
        "constants.alpha": _fmt(c.alpha),
        "constants.d": _fmt(c.d),
        "constants.upsilon": _fmt(c.upsilon),
        "constants.gamma_tilde": _fmt(c.gamma_tilde),
        "constants.exact_alpha_lower": _fmt(c.exact_alpha_lower),
        "constants.exact_alpha_upper": _fmt(c.exact_alpha_upper),
        "constants.exact_alpha": _fmt(c.exact_alpha),
        "constants.exact_gamma_tilde": _fmt(c.exact_gamma_tilde),
        "certificate.verdict": _verdict(c.certificate_valid),
        "certificate.exact_verdict": _verdict(c.exact_certificate_valid),
        "audit.discrepancies": str(len(report.discrepancies)),
    })
    for check in report.iss:
        prefix = f"iss.{check.basis}_{check.source}"
        summary[f"{prefix}.checked"] = str(check.checked)
        summary[f"{prefix}.violations"] = str(check.violation_count)
        summary[f"{prefix}.domain_flags"] = str(len(check.domain_flags))
    m = report.metrics
    summary.update({
        "metrics.n_vehicles": str(m.n_vehicles),
        "metrics.platoon_peak": _fmt(m.platoon_peak),
        "metrics.initial_max": _fmt(m.initial_max),
        "metrics.bound": _fmt(m.bound),
        "metrics.within_bound": _verdict(m.within_bound),
        "metrics.terminal_max": _fmt(float(np.max(m.terminal))),
        "metrics.min_gap": _fmt(m.min_gap),
    })
    if report.attenuation is not None:
        a = report.attenuation
        summary.update({
            "attenuation.window": f"{_fmt(a.window[0])}, {_fmt(a.window[1])}",
            "attenuation.head_peak_dv": _fmt(float(a.peak_dv[0])) if a.peak_dv.size else "nan",
            "attenuation.tail_peak_dv": _fmt(float(a.peak_dv[-1])) if a.peak_dv.size else "nan",
            "attenuation.tail_peak_gap": _fmt(float(a.peak_gap[-1])) if a.peak_gap.size else "nan",
            "attenuation.adjacent_decrease_fraction": _fmt(a.adjacent_decrease_fraction),
            "attenuation.verdict": _verdict(a.attenuates),
        })
    return summary


def report_text(report: StabilityReport) -> str:
    """Human-readable report."""
    c = report.constants
    lines = [
        f"Stability report: {report.run.get('config', '?')} (seed {report.run.get('seed', '?')}, dt {report.run.get('dt', '?')})",
        "",
        f"Policy: {c.policy.value} spacing",
        f"  alpha_lower={_fmt(c.alpha_lower)}  alpha_upper={_fmt(c.alpha_upper)}  alpha={_fmt(c.alpha)}",
        f"  d={_fmt(c.d)}  upsilon={_fmt(c.upsilon)}  gamma_tilde={c.gamma_tilde:.4f}",
        f"  certificate: {_verdict(c.certificate_valid)}",
        f"Exact quadratic-form constants:",
        f"  alpha_lower={_fmt(c.exact_alpha_lower)}  alpha_upper={_fmt(c.exact_alpha_upper)}  alpha={_fmt(c.exact_alpha)}",
        f"  gamma_tilde={_fmt(c.exact_gamma_tilde)}  certificate: {_verdict(c.exact_certificate_valid)}",
        "",
        f"Printed matrix audit: {len(report.discrepancies)} discrepancies",
    ]
    for item in report.discrepancies:
        where = f"({item.row},{item.col})" if item.row >= 0 else ""
        lines.append(f"  {item.matrix} {item.kind}{where}: printed {_fmt(item.printed)}, form {_fmt(item.expected)}")
    lines.append("")
    for check in report.iss:
        lines.append(
            f"ISS decrease ({check.basis} constants, {check.source} derivative): "
            f"{check.checked} samples checked, {check.violation_count} violations"
        )
        for flag in check.domain_flags:
            lines.append(f"  domain: {flag}")
    m = report.metrics
    lines += [
        "",
        f"String metrics (N+1={m.n_vehicles}): peak {_fmt(m.platoon_peak)}, bound {_fmt(m.bound)} -> {_verdict(m.within_bound)}",
        f"  terminal max {_fmt(float(np.max(m.terminal)))}, min gap {_fmt(m.min_gap)} m",
    ]
    if report.attenuation is not None:
        a = report.attenuation
        lines.append(f"Attenuation in [{_fmt(a.window[0])}, {_fmt(a.window[1])}] s: {_verdict(a.attenuates)}")
        for vehicle, peak_dv, peak_spacing, peak_gap in zip(a.vehicles, a.peak_dv, a.peak_spacing, a.peak_gap):
            lines.append(
                f"  vehicle {vehicle:3d}: peak |dv| {peak_dv:.4f}  peak spacing error {peak_spacing:.4f}"
                f"  peak gap error {peak_gap:.4f}"
            )
    return "\n".join(lines) + "\n"
