"""Exception types shared across the package."""


class DeepcLabError(Exception):
    """Base class for all package errors."""


class DimensionError(DeepcLabError, ValueError):
    """Incompatible array shapes or horizon/length bookkeeping."""


class ConfigError(DeepcLabError, ValueError):
    """Invalid configuration values (bounds, weights, horizons)."""


class NumericError(DeepcLabError, ArithmeticError):
    """Non-finite values encountered where finite ones are required."""


class DegenerateChannelError(DeepcLabError, ValueError):
    """A channel has zero range and cannot be min-max scaled."""


class ConvergenceError(DeepcLabError, RuntimeError):
    """An iterative solve did not reach its tolerance.

    Carries the final residual so callers can report how close it got.
    """

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (final residual {residual:.3e})")
        self.residual = residual


class TrainingError(DeepcLabError, RuntimeError):
    """Training diverged; carries the epoch at which it happened."""

    def __init__(self, message: str, epoch: int):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch
