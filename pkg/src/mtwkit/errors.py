"""Exception hierarchy shared by all mtwkit modules."""


class MTWError(Exception):
    """Base class for every error raised by mtwkit."""


class DomainViolation(MTWError):
    """A point pair left the validity set of a cost function."""


class SingularMixedHessian(MTWError):
    """|det c_xy| fell below the singularity tolerance (A2 fails here)."""


class NoSolution(MTWError):
    """Inversion of c_x or c_y did not converge; the target is out of range."""


class BadGeometry(MTWError):
    pass


class MassImbalance(MTWError):
    pass


class OracleTooLarge(MTWError):
    pass


class NonConvergence(MTWError):
    pass


class NotCConvex(MTWError):
    pass


class SeedFailure(MTWError):
    pass


class EllipticityLost(MTWError):
    """The matrix w = D^2u - A(x, Du) is not positive definite at some node."""


class LinearSolveFailure(MTWError):
    pass


class StepTooSmall(MTWError):
    pass


class ContinuationStall(MTWError):
    """Adaptive continuation step underflowed before reaching the end."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace if trace is not None else []


class ImageEscapesTarget(MTWError):
    pass


class SchemaError(MTWError):
    pass
