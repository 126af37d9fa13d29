"""Exception hierarchy shared across the toolkit.

The CLI maps these onto process exit codes: usage problems exit 2,
malformed input files exit 3, numerical failures exit 4.
"""


class KvcoreError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(KvcoreError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class FormatError(KvcoreError, ValueError):
    """A file or record does not conform to its wire format."""


class NumericalError(KvcoreError, RuntimeError):
    """A numerical procedure produced an unusable result."""


class ConvergenceError(NumericalError):
    """An iterative solver hit its iteration cap before converging."""


class OptimalityViolation(NumericalError):
    """A sampled alternative beat the supposedly optimal factors."""
