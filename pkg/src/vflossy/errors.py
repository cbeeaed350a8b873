"""Exception hierarchy shared by every module."""


class VFLossyError(Exception):
    """Base class for all package errors."""


class ValidationError(VFLossyError, ValueError):
    """Malformed input: bad PMF, bad distortion matrix, bad parameter."""


class InfeasibleError(VFLossyError, ValueError):
    """The distortion level is below the minimum achievable distortion."""


class ConvergenceError(VFLossyError, ArithmeticError):
    """A numerical solver failed to reach its tolerance."""


class GradientMismatchError(ConvergenceError):
    """Finite-difference and closed-form gradients disagree (likely a kink)."""


class QuantizationError(ValidationError):
    """A distortion value cannot be placed on a common rational grid."""


class CapacityError(VFLossyError):
    """A configured size cap (enumeration, memory, scan range) was exceeded."""


class BudgetError(VFLossyError):
    """A dictionary would exceed its codeword budget M."""


class IntegrityError(VFLossyError):
    """Corrupt file, checksum mismatch, or a violated construction invariant."""
