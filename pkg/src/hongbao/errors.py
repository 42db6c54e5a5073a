"""Exception types raised across the package."""


class HongbaoError(Exception):
    """Base class for all package errors."""


class InvalidSpecError(HongbaoError, ValueError):
    """A packet specification violates its invariants (e.g. insufficient amount)."""


class InvalidConfigError(HongbaoError, ValueError):
    """A population, behaviour or run configuration is infeasible or malformed."""


class UnidentifiedError(HongbaoError):
    """The regression has no identifying variation for a requested coefficient."""


class BootstrapInstabilityError(HongbaoError):
    """Too many bootstrap replicates were unidentified."""


class ConvergenceError(HongbaoError):
    """An iterative routine did not converge within its iteration cap."""
