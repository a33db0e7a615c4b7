"""Exception hierarchy shared by the sampler modules and the CLI."""


class SCMCError(Exception):
    """Base class for all sampler errors."""

    exit_code = 1


class ConfigError(SCMCError, ValueError):
    exit_code = 2


class DegenerateEnsembleError(SCMCError):
    """Every particle carries zero weight (or the weights are NaN)."""

    exit_code = 3


class NumericalError(SCMCError):
    exit_code = 4


class SupportWideningError(NumericalError):
    """A particle gained positive density after having zero density."""


class UnstableTrajectoryError(NumericalError):
    def __init__(self, message, theta=None):
        super().__init__(message)
        self.theta = theta


class OutsideSupportError(NumericalError):
    """An MH move was started from a zero-density state."""
