"""Exception types shared across the package."""


class AdaptLqrError(Exception):
    """Base class for all package-specific errors."""


class DimensionMismatch(AdaptLqrError, ValueError):
    """Operands have inconsistent shapes."""


class NotSquare(DimensionMismatch):
    """A square matrix was required."""


class SingularR(AdaptLqrError, ValueError):
    """Input-weight matrix R is not symmetric positive definite."""


class NotPositiveDefinite(AdaptLqrError, ValueError):
    """A symmetric positive definite matrix was required."""


class NotStabilizable(AdaptLqrError):
    """The pair (A, B) fails the numeric stabilizability test."""


class NotDetectable(AdaptLqrError):
    """The pair (A, Q^{1/2}) fails the numeric detectability test."""


class NonConvergence(AdaptLqrError):
    """An iterative solver hit its iteration cap before reaching tolerance."""


class RejectionLimitExceeded(AdaptLqrError):
    """Plant sampling kept drawing invalid plants; the family is badly posed."""


class InfeasiblePoint(AdaptLqrError):
    """A candidate parameter point violates the Riccati preconditions."""


class AllStartsInfeasible(AdaptLqrError):
    """Every optimizer start was infeasible; the family is degenerate."""


class EstimateInfeasible(AdaptLqrError):
    """A fresh estimate cannot be turned into a gain (Riccati failure)."""


class UnstableClosedLoop(AdaptLqrError):
    """A static gain does not stabilize the plant, so its ergodic cost diverges."""


class WrongFamily(AdaptLqrError, ValueError):
    """The plant does not have the structure this operation requires."""


class ConfigError(AdaptLqrError, ValueError):
    """A scenario configuration file or CLI flag combination is invalid."""


class NumericOverflow(AdaptLqrError):
    """State norm exceeded the overflow guard; the loop went unstable."""
