"""Exception types raised across the package."""


class DomainError(ValueError):
    """A time or log-SNR value lies outside the schedule's domain."""


class ScheduleError(ValueError):
    """A noise schedule could not be constructed."""


class SingularityError(ZeroDivisionError):
    """A parameterization conversion would divide by zero."""


class GridError(ValueError):
    """Time steps are inconsistent with the requested step."""


class SolverStateError(RuntimeError):
    """A multistep state lacks the buffered outputs a step needs."""


class SpecError(ValueError):
    """A solver or study specification is invalid."""


class StiffnessError(RuntimeError):
    """The reference integrator failed to reach the requested tolerance."""
