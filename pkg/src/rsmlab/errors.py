"""Typed errors shared across the package.

Singular or ill-posed quantities raise instead of returning inf/nan, so a
schedule query outside its valid range fails loudly.
"""


class RsmLabError(Exception):
    """Base class for all package errors."""


class DomainError(RsmLabError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class InvalidNoiseError(RsmLabError, ValueError):
    """Noise level incompatible with the schedule (e.g. sigma^2 > 1 - alpha_bar)."""


class SingularityError(RsmLabError, ValueError):
    """Quantity queried at a singular boundary (t=0 or t=1)."""


class UndefinedWeightError(RsmLabError, ValueError):
    """Sampler weight w = omega * delta / sigma requested on a deterministic step."""


class ContractError(RsmLabError, ValueError):
    """Caller violated an operation's calling contract."""


class ConfigError(RsmLabError, ValueError):
    """Invalid or unknown experiment configuration."""


class TrainingError(RsmLabError, RuntimeError):
    """Training diverged; carries the last finite parameter vector if available."""

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good
