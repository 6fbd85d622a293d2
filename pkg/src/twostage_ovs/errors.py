"""Exception types raised across the package."""


class OvsError(Exception):
    """Base class for all package errors."""


class BudgetExhausted(OvsError):
    """The simulation budget has been fully spent."""


class InfeasibleDecision(OvsError):
    """A second-stage decision is outside Y(x)."""


class SizeTooLarge(OvsError):
    """Requested design size exceeds the grid cardinality."""


class DegenerateWeights(OvsError):
    """Probability weights are negative, NaN, or all zero."""


class DimensionMismatch(OvsError):
    pass


class SingularCorrelation(OvsError):
    """Correlation matrix stayed indefinite after the maximum jitter."""


class SingularCovariance(OvsError):
    """Posterior covariance stayed indefinite after the maximum jitter."""


class SingularSystem(OvsError):
    """Stochastic kriging system Sigma + V could not be factorized."""


class DuplicatePoints(OvsError):
    pass


class NonFiniteInput(OvsError):
    pass


class IncompleteSite(OvsError):
    """A site is missing incumbents or gap estimates."""


class AllocationInfeasible(OvsError):
    """Random-SAA allocation C / (N1 N2) is below one."""


class ZeroDenominator(OvsError):
    pass


class ConfigError(OvsError):
    """Invalid experiment configuration."""
