"""
Exception types for Silhouette Lab.
Rooted at the matching built-ins so callers can catch either; each carries the
process exit code the CLI uses for it.
"""


class InvalidArgumentError(ValueError):
    """Bad range, shape, id or malformed input file."""
    exit_code = 2


class DegenerateMeshError(InvalidArgumentError):
    """Mesh with invalid faces or zero total area."""


class BehindCameraError(InvalidArgumentError):
    """A point that must be projected has non-positive depth."""


class EmptyMaskError(InvalidArgumentError):
    """Sampling requested from a mask with no foreground pixel."""


class DomainError(ArithmeticError):
    """log/sqrt evaluated outside its domain on the tape."""
    exit_code = 3


class NumericalFailure(RuntimeError):
    """NaN/Inf gradient or a diverging fit.

    ``state`` holds the last good optimisation state when the fit loop raises it.
    """
    exit_code = 3

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class AcceptanceFailure(RuntimeError):
    """A gradient check suite reported failures."""
    exit_code = 4
