"""Run configuration files: parse, validate, serialize, override.

A run configuration is a flat list of dotted `key = value` lines:

    controller.policy = constant
    controller.k_dp = 1.0
    disturbance.0.kind = pulse

Lines are read with python-dotenv's parser so every binding keeps its line
number; diagnostics name `path:line` and the offending key.  Keys that are
absent take the defaults of the constant-spacing reference experiment.  A
`schedule.*` or `disturbance.*` block present in the file replaces the
default block as a whole; `disturbance.enabled = false` removes all
disturbances.
"""

import hashlib
import io
import logging
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

from dotenv.parser import parse_stream

from .config import SWEEP_CAP, SWEEP_WORKERS
from .errors import ConfigurationError, DomainError
from .models import (
    ControllerParams,
    Disturbance,
    DisturbanceKind,
    EquilibriumSpec,
    InitialConditionSpec,
    Limits,
    Policy,
    RhoParams,
    Scenario,
)

logger = logging.getLogger(__name__)

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")

_SCALAR_KEYS = (
    "run.name", "run.output_dir", "run.log_level",
    "scenario.n_vehicles", "scenario.dt", "scenario.t_end", "scenario.divergence_limit",
    "equilibrium.dp_bar", "equilibrium.v_bar",
    "limits.a_max", "limits.v_max", "limits.v_min",
    "controller.policy", "controller.k_dp", "controller.k_dv", "controller.upsilon", "controller.lambda",
    "controller.a", "controller.b", "controller.gamma_dp", "controller.gamma_dv",
    "ic.seed", "ic.dp_halfwidth", "ic.dv_halfwidth", "ic.head_only",
    "disturbance.enabled",
    "analysis.iss", "analysis.window",
    "sweep.cap", "sweep.workers", "sweep.simulate", "sweep.write_logs",
)
_SCHEDULE_KEY = re.compile(r"^schedule\.(\d+)\.(t|v)$")
_DISTURBANCE_KEY = re.compile(r"^disturbance\.(\d+)\.(target|kind|amplitude|t_start|t_end|frequency)$")
_AXIS_KEY = re.compile(r"^sweep\.axis\.(.+)$")
_LIST_KEYS = ("controller.lambda", "analysis.window")  # axis values separated by ";"


@dataclass(frozen=True)
class RunConfig:
    """A scenario plus output, analysis and sweep settings."""
    name: str = "run"
    scenario: Scenario = field(default_factory=Scenario)
    output_dir: Optional[str] = None
    log_level: Optional[str] = None
    analysis_iss: bool = True
    analysis_window: Tuple[float, float] = (35.0, 60.0)
    sweep_cap: int = SWEEP_CAP
    sweep_workers: int = SWEEP_WORKERS
    sweep_simulate: bool = False
    sweep_write_logs: bool = False
    sweep_axes: Tuple[Tuple[str, Tuple[str, ...]], ...] = ()

    @property
    def seed(self) -> int:
        return self.scenario.ic.seed

    @property
    def dt(self) -> float:
        return self.scenario.dt


@dataclass
class FlatConfig:
    """Key/value bindings with the line each one came from."""
    values: Dict[str, str] = field(default_factory=dict)
    lines: Dict[str, int] = field(default_factory=dict)
    source: Optional[str] = None

    def error(self, key: str, message: str) -> ConfigurationError:
        return ConfigurationError(f"{key}: {message}", source=self.source, line=self.lines.get(key))


def is_known_key(key: str) -> bool:
    return (
        key in _SCALAR_KEYS
        or _SCHEDULE_KEY.match(key) is not None
        or _DISTURBANCE_KEY.match(key) is not None
        or _AXIS_KEY.match(key) is not None
    )


def _binding_line(binding) -> int:
    # a binding's text starts with the blank lines that precede it
    text = binding.original.string
    return binding.original.line + text[: len(text) - len(text.lstrip())].count("\n")


def parse_config_text(text: str, source: Optional[str] = None) -> FlatConfig:
    """Read bindings, rejecting malformed lines, unknown keys and duplicates."""
    flat = FlatConfig(source=source)
    for binding in parse_stream(io.StringIO(text)):
        line = _binding_line(binding)
        if binding.error:
            raise ConfigurationError(f"malformed line: {binding.original.string.strip()!r}", source, line)
        if binding.key is None:
            continue
        key = binding.key
        if binding.value is None:
            raise ConfigurationError(f"{key}: missing '= value'", source, line)
        if not is_known_key(key):
            raise ConfigurationError(f"unknown key {key!r}", source, line)
        if key in flat.values:
            raise ConfigurationError(f"duplicate key {key!r} (first set on line {flat.lines[key]})", source, line)
        flat.values[key] = binding.value.strip()
        flat.lines[key] = line
    return flat


def _convert(flat: FlatConfig, key: str, convert: Callable[[str], object]):
    raw = flat.values[key]
    try:
        return convert(raw)
    except (TypeError, ValueError) as e:
        raise flat.error(key, f"cannot use {raw!r}: {e}") from None


def _to_bool(raw: str) -> bool:
    lowered = raw.lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ValueError("expected true or false")


def _to_int(raw: str) -> int:
    return int(raw, 10)


def _to_floats(raw: str) -> Tuple[float, ...]:
    parts = [part.strip() for part in raw.split(",")]
    if not all(parts):
        raise ValueError("empty entry in list")
    return tuple(float(part) for part in parts)


def _to_window(raw: str) -> Tuple[float, float]:
    values = _to_floats(raw)
    if len(values) != 2 or not values[0] < values[1]:
        raise ValueError("expected 'start, end' with start < end")
    return values[0], values[1]


def _to_level(raw: str) -> str:
    level = raw.upper()
    if level not in LOG_LEVELS:
        raise ValueError(f"expected one of {', '.join(LOG_LEVELS)}")
    return level


def _get(flat: FlatConfig, key: str, convert: Callable[[str], object], default):
    if key not in flat.values:
        return default
    return _convert(flat, key, convert)


def _indexed_blocks(flat: FlatConfig, pattern: "re.Pattern") -> Dict[int, Dict[str, str]]:
    blocks: Dict[int, Dict[str, str]] = {}
    for key in flat.values:
        match = pattern.match(key)
        if match:
            blocks.setdefault(int(match.group(1)), {})[match.group(2)] = key
    return blocks


def _schedule(flat: FlatConfig, default: Tuple[Tuple[float, float], ...]) -> Tuple[Tuple[float, float], ...]:
    blocks = _indexed_blocks(flat, _SCHEDULE_KEY)
    if not blocks:
        return default
    schedule = []
    for index in sorted(blocks):
        keys = blocks[index]
        for part in ("t", "v"):
            if part not in keys:
                raise flat.error(next(iter(keys.values())), f"schedule entry {index} has no '{part}'")
        schedule.append((_convert(flat, keys["t"], float), _convert(flat, keys["v"], float)))
    if schedule[0][0] != 0.0:
        raise flat.error(blocks[min(blocks)]["t"], "the first schedule entry must start at t = 0")
    return tuple(schedule)


def _disturbances(flat: FlatConfig, default: Tuple[Disturbance, ...]) -> Tuple[Disturbance, ...]:
    enabled = _get(flat, "disturbance.enabled", _to_bool, True)
    blocks = _indexed_blocks(flat, _DISTURBANCE_KEY)
    if not enabled:
        if blocks:
            raise flat.error("disturbance.enabled", "disturbances are disabled but entries are given")
        return ()
    if not blocks:
        return default
    disturbances = []
    for index in sorted(blocks):
        keys = blocks[index]
        for part in ("target", "kind", "amplitude", "t_start", "t_end"):
            if part not in keys:
                raise flat.error(next(iter(keys.values())), f"disturbance entry {index} has no '{part}'")
        values = dict(
            target=_convert(flat, keys["target"], _to_int),
            kind=_convert(flat, keys["kind"], DisturbanceKind),
            amplitude=_convert(flat, keys["amplitude"], float),
            t_start=_convert(flat, keys["t_start"], float),
            t_end=_convert(flat, keys["t_end"], float),
            frequency=_convert(flat, keys["frequency"], float) if "frequency" in keys else 0.0,
        )
        try:
            disturbances.append(Disturbance(**values))
        except (ConfigurationError, DomainError) as e:
            raise flat.error(keys["t_start"], str(e)) from None
    return tuple(disturbances)


def _controller(flat: FlatConfig, default: ControllerParams) -> ControllerParams:
    policy = _get(flat, "controller.policy", Policy, default.policy)
    lambda_default = default.rho.lambda_diag
    if len(lambda_default) != policy.rho_dim:
        lambda_default = (1.5,) * policy.rho_dim
    lambda_diag = _get(flat, "controller.lambda", _to_floats, lambda_default)
    if len(lambda_diag) != policy.rho_dim:
        key = "controller.lambda" if "controller.lambda" in flat.values else "controller.policy"
        raise flat.error(key, f"{policy.value} policy needs {policy.rho_dim} filter pole(s), got {len(lambda_diag)}")
    rho = RhoParams(
        lambda_diag=lambda_diag,
        a=_get(flat, "controller.a", float, default.rho.a),
        b=_get(flat, "controller.b", float, default.rho.b),
        gamma_dp=_get(flat, "controller.gamma_dp", float, default.rho.gamma_dp),
        gamma_dv=_get(flat, "controller.gamma_dv", float, default.rho.gamma_dv),
    )
    return ControllerParams(
        policy=policy,
        k_dp=_get(flat, "controller.k_dp", float, default.k_dp),
        k_dv=_get(flat, "controller.k_dv", float, default.k_dv),
        rho=rho,
        upsilon=_get(flat, "controller.upsilon", float, default.upsilon),
    )


def _sweep_axes(flat: FlatConfig) -> Tuple[Tuple[str, Tuple[str, ...]], ...]:
    axes = []
    for key in flat.values:
        match = _AXIS_KEY.match(key)
        if not match:
            continue
        target = match.group(1)
        if target not in _SCALAR_KEYS or target.startswith(("sweep.", "run.")):
            raise flat.error(key, f"cannot sweep over {target!r}")
        values = tuple(part.strip() for part in flat.values[key].split(";" if target in _LIST_KEYS else ","))
        if not all(values):
            raise flat.error(key, "empty value in axis")
        axes.append((target, values))
    return tuple(axes)


def build_run_config(flat: FlatConfig, name: Optional[str] = None) -> RunConfig:
    """Turn bindings into a validated RunConfig; absent keys keep their defaults."""
    base = Scenario()
    try:
        scenario = Scenario(
            n_vehicles=_get(flat, "scenario.n_vehicles", _to_int, base.n_vehicles),
            dt=_get(flat, "scenario.dt", float, base.dt),
            t_end=_get(flat, "scenario.t_end", float, base.t_end),
            speed_schedule=_schedule(flat, base.speed_schedule),
            disturbances=_disturbances(flat, base.disturbances),
            ic=InitialConditionSpec(
                seed=_get(flat, "ic.seed", _to_int, base.ic.seed),
                dp_halfwidth=_get(flat, "ic.dp_halfwidth", float, base.ic.dp_halfwidth),
                dv_halfwidth=_get(flat, "ic.dv_halfwidth", float, base.ic.dv_halfwidth),
                head_only=_get(flat, "ic.head_only", _to_bool, base.ic.head_only),
            ),
            limits=Limits(
                a_max=_get(flat, "limits.a_max", float, base.limits.a_max),
                v_max=_get(flat, "limits.v_max", float, base.limits.v_max),
                v_min=_get(flat, "limits.v_min", float, base.limits.v_min),
            ),
            controller=_controller(flat, base.controller),
            eq=EquilibriumSpec(
                dp_bar=_get(flat, "equilibrium.dp_bar", float, base.eq.dp_bar),
                v_bar=_get(flat, "equilibrium.v_bar", float, base.eq.v_bar),
            ),
            divergence_limit=_get(flat, "scenario.divergence_limit", float, base.divergence_limit),
        )
        _ = scenario.n_steps  # t_end must be a multiple of dt
    except ConfigurationError as e:
        if e.source is not None:
            raise
        raise ConfigurationError(str(e), source=flat.source) from None
    except DomainError as e:
        raise ConfigurationError(str(e), source=flat.source) from None

    cap = _get(flat, "sweep.cap", _to_int, SWEEP_CAP)
    workers = _get(flat, "sweep.workers", _to_int, SWEEP_WORKERS)
    if cap < 1:
        raise flat.error("sweep.cap", "must be at least 1")
    if workers < 1:
        raise flat.error("sweep.workers", "must be at least 1")
    return RunConfig(
        name=_get(flat, "run.name", str, name or "run"),
        scenario=scenario,
        output_dir=_get(flat, "run.output_dir", str, None),
        log_level=_get(flat, "run.log_level", _to_level, None),
        analysis_iss=_get(flat, "analysis.iss", _to_bool, True),
        analysis_window=_get(flat, "analysis.window", _to_window, (35.0, 60.0)),
        sweep_cap=cap,
        sweep_workers=workers,
        sweep_simulate=_get(flat, "sweep.simulate", _to_bool, False),
        sweep_write_logs=_get(flat, "sweep.write_logs", _to_bool, False),
        sweep_axes=_sweep_axes(flat),
    )


def read_config_file(path: Path) -> Tuple[FlatConfig, str]:
    """Bindings of a config file and the SHA-256 of its bytes."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise ConfigurationError(f"cannot read config: {e.strerror}", source=str(path)) from None
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError:
        raise ConfigurationError("config is not UTF-8 text", source=str(path)) from None
    return parse_config_text(text, source=str(path)), hashlib.sha256(data).hexdigest()


def apply_overrides(flat: FlatConfig, overrides: Dict[str, str]) -> FlatConfig:
    """Command-line overrides replace file values; the line of an overridden key is dropped."""
    for key, value in overrides.items():
        if not is_known_key(key):
            raise ConfigurationError(f"unknown override key {key!r}")
        flat.values[key] = value
        flat.lines.pop(key, None)
    return flat


def load_config(path: Path, overrides: Optional[Dict[str, str]] = None) -> RunConfig:
    flat, _ = read_config_file(path)
    if overrides:
        apply_overrides(flat, overrides)
    config = build_run_config(flat, name=Path(path).stem)
    logger.debug(f"Loaded config {path}: {config.scenario.controller.policy.value} policy, N+1={config.scenario.n_vehicles}")
    return config


def _fmt_float(value: float) -> str:
    return repr(float(value))


def _fmt_bool(value: bool) -> str:
    return "true" if value else "false"


def config_items(config: RunConfig) -> List[Tuple[str, str]]:
    """Every key of a config in the fixed serialization order."""
    s = config.scenario
    c = s.controller
    items: List[Tuple[str, str]] = [("run.name", config.name)]
    if config.output_dir is not None:
        items.append(("run.output_dir", config.output_dir))
    if config.log_level is not None:
        items.append(("run.log_level", config.log_level))
    items += [
        ("scenario.n_vehicles", str(s.n_vehicles)),
        ("scenario.dt", _fmt_float(s.dt)),
        ("scenario.t_end", _fmt_float(s.t_end)),
        ("scenario.divergence_limit", _fmt_float(s.divergence_limit)),
        ("equilibrium.dp_bar", _fmt_float(s.eq.dp_bar)),
        ("equilibrium.v_bar", _fmt_float(s.eq.v_bar)),
    ]
    for index, (t, v) in enumerate(s.speed_schedule):
        items += [(f"schedule.{index}.t", _fmt_float(t)), (f"schedule.{index}.v", _fmt_float(v))]
    items += [
        ("limits.a_max", _fmt_float(s.limits.a_max)),
        ("limits.v_max", _fmt_float(s.limits.v_max)),
        ("limits.v_min", _fmt_float(s.limits.v_min)),
        ("controller.policy", c.policy.value),
        ("controller.k_dp", _fmt_float(c.k_dp)),
        ("controller.k_dv", _fmt_float(c.k_dv)),
        ("controller.upsilon", _fmt_float(c.upsilon)),
        ("controller.lambda", ", ".join(_fmt_float(lam) for lam in c.rho.lambda_diag)),
        ("controller.a", _fmt_float(c.rho.a)),
        ("controller.b", _fmt_float(c.rho.b)),
        ("controller.gamma_dp", _fmt_float(c.rho.gamma_dp)),
        ("controller.gamma_dv", _fmt_float(c.rho.gamma_dv)),
        ("ic.seed", str(s.ic.seed)),
        ("ic.dp_halfwidth", _fmt_float(s.ic.dp_halfwidth)),
        ("ic.dv_halfwidth", _fmt_float(s.ic.dv_halfwidth)),
        ("ic.head_only", _fmt_bool(s.ic.head_only)),
        ("disturbance.enabled", _fmt_bool(bool(s.disturbances))),
    ]
    for index, item in enumerate(s.disturbances):
        items += [
            (f"disturbance.{index}.target", str(item.target)),
            (f"disturbance.{index}.kind", item.kind.value),
            (f"disturbance.{index}.amplitude", _fmt_float(item.amplitude)),
            (f"disturbance.{index}.t_start", _fmt_float(item.t_start)),
            (f"disturbance.{index}.t_end", _fmt_float(item.t_end)),
            (f"disturbance.{index}.frequency", _fmt_float(item.frequency)),
        ]
    items += [
        ("analysis.iss", _fmt_bool(config.analysis_iss)),
        ("analysis.window", f"{_fmt_float(config.analysis_window[0])}, {_fmt_float(config.analysis_window[1])}"),
        ("sweep.cap", str(config.sweep_cap)),
        ("sweep.workers", str(config.sweep_workers)),
        ("sweep.simulate", _fmt_bool(config.sweep_simulate)),
        ("sweep.write_logs", _fmt_bool(config.sweep_write_logs)),
    ]
    separator = {key: "; " for key in _LIST_KEYS}
    for target, values in config.sweep_axes:
        items.append((f"sweep.axis.{target}", separator.get(target, ", ").join(values)))
    return items


def dump_config(config: RunConfig) -> str:
    return "".join(f"{key} = {value}\n" for key, value in config_items(config))


def with_values(config: RunConfig, values: Dict[str, str]) -> RunConfig:
    """A copy of `config` with some flat keys replaced; used for sweep points."""
    flat = FlatConfig(values=dict(config_items(config)))
    apply_overrides(flat, values)
    point = build_run_config(flat)
    return replace(point, sweep_axes=())
