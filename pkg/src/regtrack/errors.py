"""Exception types shared across the package."""


class NumericDomainError(ValueError):
    """A covariance could not be factorized even after one jitter attempt."""


class FusionDegenerateError(ArithmeticError):
    """Fused cardinality mass underflowed to zero."""


class RegistrationUnavailable(RuntimeError):
    """Not enough information to compute a registration estimate."""


class ScenarioError(ValueError):
    """A scenario document failed validation.

    ``violations`` holds ``(line, message)`` pairs; line is 0 when unknown.
    """

    def __init__(self, violations):
        self.violations = list(violations)
        lines = [f"line {ln}: {msg}" if ln else msg for ln, msg in self.violations]
        super().__init__("\n".join(lines) or "invalid scenario")
