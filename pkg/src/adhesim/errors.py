"""Error taxonomy shared by all adhesim modules.

Every failure mode raised by the library derives from AdhesimError so that the
CLI can map families of errors to stable exit codes.
"""


class AdhesimError(Exception):
    """Base class for all adhesim errors."""


class DomainError(AdhesimError):
    """Geometry violated: a point, atom, or separation left its admissible domain."""


class MassMismatch(AdhesimError):
    """Measures compared under the transport metric must carry equal mass."""


class EmptyMeasure(AdhesimError):
    """An operation that needs a nonzero measure received total variation 0."""


class NonConvergence(AdhesimError):
    """Iterative solve failed to reach tolerance within the iteration budget.

    Carries the last iterate and the residual (or contraction-factor) history so
    callers can inspect or restart.
    """

    def __init__(self, message, last=None, history=None):
        super().__init__(message)
        self.last = last
        self.history = list(history) if history is not None else []


class SingularPreconditioner(AdhesimError):
    """The anchor linearization could not be factorized for preconditioning."""


class SingularX(AdhesimError):
    """Certificate assembly failed: I - dY/dw is singular or too ill-conditioned."""


class DegenerateState(AdhesimError):
    """No finite CFL restriction exists (zero field, zero drift, zero viscosity)
    and no fallback step size was provided."""


class CFLViolation(AdhesimError):
    """A step was attempted with dt above the stability limit."""


class NegativityBreach(AdhesimError):
    """Clipped negative mass in one step exceeded the per-step budget."""


class BoundBreach(AdhesimError):
    """A monitored a-priori bound (sup norm) was exceeded beyond tolerance."""


class CertificateBreach(AdhesimError):
    """A certified monitor radius was exceeded; carries the breach time."""

    def __init__(self, message, t=None, monitor=None):
        super().__init__(message)
        self.t = t
        self.monitor = monitor


class AdmissibilityError(AdhesimError):
    """Initial data or parameters violate the admissibility preconditions."""


class ParseError(AdhesimError):
    """Configuration file could not be read or decoded."""


class ValidationError(AdhesimError):
    """Configuration decoded but a field violates its rule.

    field: dot-path of the offending entry, reason: the violated rule.
    """

    def __init__(self, field, reason):
        super().__init__(f"{field}: {reason}")
        self.field = field
        self.reason = reason
