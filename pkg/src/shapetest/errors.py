"""Exception types shared across the package."""


class ShapeTestError(Exception):
    """Base class for package-specific failures."""


class InfeasibleConstraints(ShapeTestError):
    """The constraint set admits no coefficient vector."""


class ConvergenceFailure(ShapeTestError):
    """An iterative solver exhausted its iteration budget."""


class DataFormatError(ShapeTestError):
    """Input data could not be parsed."""
