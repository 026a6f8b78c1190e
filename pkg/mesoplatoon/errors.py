"""Exception types raised by the toolkit."""

from typing import Optional


class PlatoonError(ValueError):
    """Base class for every error the toolkit raises on bad input or state."""


class DomainError(PlatoonError):
    """A value lies outside the domain an operation accepts."""


class ConfigurationError(PlatoonError):
    """Invalid parameters, config files, or inconsistent inputs."""

    def __init__(self, message: str, source: Optional[str] = None, line: Optional[int] = None):
        self.source = source
        self.line = line
        if source is not None and line is not None:
            message = f"{source}:{line}: {message}"
        elif source is not None:
            message = f"{source}: {message}"
        super().__init__(message)


class SchemaError(PlatoonError):
    """A trajectory CSV does not match the scenario it is analysed against."""


class SimulationDiverged(PlatoonError):
    """The integrator produced a non-finite or runaway error state."""

    def __init__(self, step: int, vehicle: int, time: float, value: float):
        self.step = step
        self.vehicle = vehicle
        self.time = time
        self.value = value
        super().__init__(
            f"simulation diverged at step {step} (t={time:g} s), vehicle {vehicle}: |error|={value!r}"
        )
