"""Exception hierarchy shared by all levyscale modules."""


class LevyscaleError(Exception):
    """Base class for every error raised by this package."""


class ParameterError(LevyscaleError, ValueError):
    """A numeric argument is outside its admissible range."""


class ArgumentError(LevyscaleError, ValueError):
    """Arguments are individually valid but inconsistent with each other."""


class CapacityError(LevyscaleError, MemoryError):
    """A requested allocation exceeds the configured capacity."""


class ConfigurationError(LevyscaleError, ValueError):
    """A model, experiment or CLI configuration is rejected.

    ``key`` names the offending configuration entry when one is known.
    """

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class ScheduleError(ConfigurationError):
    """A scale schedule violates the defining relations of its regime."""


class ModelError(LevyscaleError):
    """A coefficient map produced invalid output or violates a condition."""


class PrerequisiteError(LevyscaleError):
    """A required upstream estimate (e.g. contraction rate) is missing."""


class NumericalError(LevyscaleError, ArithmeticError):
    """A quadrature or other numerical procedure produced non-finite output."""


class IllConditionedError(NumericalError):
    """A finite-difference request cannot be resolved above Monte Carlo noise."""


class BlowUpError(NumericalError):
    """A simulated state left the finite range; ``step`` is the step index."""

    def __init__(self, message, step):
        super().__init__(message)
        self.step = step
