"""Exception types raised across the toolkit."""


class SlowFastError(Exception):
    pass


class InvalidGenerator(SlowFastError, ValueError):
    """Rate matrix has nonzero row sums, negative off-diagonals or bad shape."""


class NotWeaklyIrreducible(SlowFastError, ValueError):
    """Generator block has no unique quasi-stationary distribution."""


class ScheduleGapError(SlowFastError, ValueError):
    """Requested time lies outside a generator schedule."""


class NonFiniteError(SlowFastError, FloatingPointError):
    """A simulated path blew up (NaN or infinity)."""

    def __init__(self, message, node=None, path=None):
        super().__init__(message)
        self.node = node
        self.path = path


class StepTooCoarse(SlowFastError, ValueError):
    """Time step exceeds the fast time scale epsilon."""


class NotPSD(SlowFastError, ValueError):
    pass


class GridExtrapolation(SlowFastError, ValueError):
    """Query left the tabulated box of a grid-mode averaged model."""


class AllBelowNoiseFloor(SlowFastError, UserWarning):
    """No time point carries signal above Monte Carlo noise."""


class BudgetExceeded(SlowFastError, RuntimeError):
    pass


class ConfigInvalid(SlowFastError, ValueError):
    def __init__(self, message, key=None):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key


class StudyFailed(SlowFastError, RuntimeError):
    pass
