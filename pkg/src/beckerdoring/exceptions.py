"""Exception hierarchy.

Every numerical failure mode gets its own class so the CLI can map them to
exit codes and so reports can carry structured failure sections.
"""


class BDError(Exception):
    """Base class for all package errors.

    ``report`` optionally carries whatever partial results were computed
    before the failure, so callers can still write them out.
    """

    def __init__(self, *args, report=None):
        super().__init__(*args)
        self.report = report


class InvalidModelError(BDError, ValueError):
    pass


class LengthMismatchError(BDError, ValueError):
    pass


class SupercriticalError(BDError, ValueError):
    pass


class TruncationTooSmallError(BDError):
    pass


class StiffnessError(BDError):
    """Step size underflow; an implicit method is usually the fix."""


class IntegrationError(BDError):
    pass


class ConsistencyError(BDError):
    pass


class SpectralError(BDError):
    pass


class DissipativityError(BDError):
    def __init__(self, message, witness=None, value=None):
        super().__init__(message)
        self.witness = witness
        self.value = value


class InfeasiblePerturbationError(BDError, ValueError):
    pass


class FitDomainError(BDError, ValueError):
    pass


class BoundError(BDError):
    pass


class QuadratureError(BDError):
    """Integrand still significant at the grid edge; widen the grid."""


class FormulationError(BDError):
    pass


class ConfigError(BDError, ValueError):
    pass


# exceptions that indicate a numerical (not input) failure
NUMERICAL_ERRORS = (
    TruncationTooSmallError,
    StiffnessError,
    IntegrationError,
    ConsistencyError,
    SpectralError,
    DissipativityError,
    BoundError,
    QuadratureError,
    FormulationError,
)
