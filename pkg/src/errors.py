"""Exception types shared by the solver modules."""


class SolverError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(SolverError, ValueError):
    """Invalid problem, search or solver configuration."""


class DomainError(SolverError, ValueError):
    """A point lies outside the domain box."""


class EmptyMeasureError(SolverError, ValueError):
    """Operation needs a nonempty measure."""


class DegenerateParameterError(SolverError, ValueError):
    """Derivatives of the finite objective requested at a zero weight."""


class CoefficientStallError(SolverError, RuntimeError):
    """Inner coefficient solver ran out of iterations without a certificate."""

    def __init__(self, message, certificate=None, iterations=None):
        super().__init__(message)
        self.certificate = certificate
        self.iterations = iterations


class ReferenceNotConvergedError(SolverError, RuntimeError):
    """Reference solve did not reach its certificate."""


class ProblemMismatchError(SolverError, ValueError):
    """Artifacts from different problems cannot be compared."""
