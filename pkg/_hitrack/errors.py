class HitrackError(Exception):
    """Base class for every error raised by hitrack."""


class DimensionError(HitrackError, ValueError):
    """Array shapes that must agree do not."""


class SymmetryError(HitrackError, ValueError):
    """A spectrum expected to come from a real map is not conjugate-symmetric."""


class ParameterError(HitrackError, ValueError):
    """A scalar parameter is outside its valid range."""


class SizeError(HitrackError, ValueError):
    """An image region is too small for the requested operation."""


class IngestionError(HitrackError, ValueError):
    """A feature file could not be read or does not match the layer specs."""

    def __init__(self, message: str, layer: str | None = None):
        """Initializes the error.

        Args:
            message: What went wrong.
            layer: Name of the offending layer, when known.
        """
        super().__init__(f"{layer}: {message}" if layer else message)
        self.layer = layer


class SingularityError(HitrackError, ArithmeticError):
    """A closed-form solve hit a zero denominator."""


class StateError(HitrackError, RuntimeError):
    """An operation was called on an object in the wrong state."""


class DivergenceError(HitrackError, ArithmeticError):
    """An iterative solver produced a non-finite residual."""

    def __init__(self, message: str, iteration: int):
        """Initializes the error.

        Args:
            message: What went wrong.
            iteration: Index of the iteration at which the solver diverged.
        """
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration


class NumericError(HitrackError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class ConditioningError(HitrackError, ArithmeticError):
    """A matrix that must be inverted is singular or nearly so."""


class BoundaryError(HitrackError, ValueError):
    """A requested image region lies entirely outside the image."""


class InputError(HitrackError, ValueError):
    """Invalid user input (boxes, command-line arguments, files)."""


class SequenceError(HitrackError, ValueError):
    """A dataset sequence on disk is malformed."""

    def __init__(self, message: str, line: int | None = None):
        """Initializes the error.

        Args:
            message: What went wrong.
            line: 1-based line number in the ground-truth file, when known.
        """
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class ScenarioError(HitrackError, ValueError):
    """A synthetic scenario cannot be rendered as scripted."""


class ConfigError(HitrackError, ValueError):
    """A configuration key or value is invalid."""


__all__ = [
    "HitrackError",
    "DimensionError",
    "SymmetryError",
    "ParameterError",
    "SizeError",
    "IngestionError",
    "SingularityError",
    "StateError",
    "DivergenceError",
    "NumericError",
    "ConditioningError",
    "BoundaryError",
    "InputError",
    "SequenceError",
    "ScenarioError",
    "ConfigError",
]
