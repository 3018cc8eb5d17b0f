class MjlsError(Exception):
    """Base class for errors raised by mjlspo."""


class ModelFormatError(MjlsError, ValueError):
    """A model or policy file could not be parsed."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class ModelValidationError(MjlsError, ValueError):
    def __init__(self, violations):
        self.violations = list(violations)
        lines = "; ".join(str(v) for v in self.violations)
        super().__init__("invalid model: " + lines)


class NotMeanSquareStable(MjlsError):
    """The policy (or, for Riccati, every policy) fails mean-square stability.

    The cost of such a policy is infinite.
    """

    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class NotConverged(MjlsError):
    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class RadiusNotConverged(NotConverged):
    """Power iteration stalled; carries the last estimate and iterate."""

    def __init__(self, message, estimate, iterate, iterations):
        super().__init__(message, iterations=iterations)
        self.estimate = estimate
        self.iterate = iterate


class CertificationViolation(MjlsError):
    """A step with a certified step size produced a non-stabilizing policy."""
