"""
Exception hierarchy for ConvGrid
"""


class ConvGridError(Exception):
    """Base class for every error raised by the library"""


class InvalidArgumentError(ConvGridError, ValueError):
    """An argument is outside the domain of an operation"""


class NoParentsError(InvalidArgumentError):
    """Raised when asking for the parents of a unit vector"""

    def __init__(self, message="Unit vectors have no parents."):
        super().__init__(message)


class DegenerateDomainError(ConvGridError, ValueError):
    """The grid or point set has no interior (too few or collinear points)"""


class StencilValidationError(ConvGridError, ValueError):
    """A stencil family violates Stability, Visibility or containment"""

    def __init__(self, report):
        self.report = report
        super().__init__(str(report))


class NotConvexError(ConvGridError, ValueError):
    """A function expected to be discretely convex is not"""


class SolverError(ConvGridError, RuntimeError):
    """The convex-program solver did not reach an optimal point"""

    def __init__(self, message, solution=None):
        self.solution = solution
        super().__init__(message)
