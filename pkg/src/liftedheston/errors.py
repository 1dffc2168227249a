"""Exception types raised across the package."""


class LiftedHestonError(Exception):
    """Base class for all package errors."""


class ConfigError(LiftedHestonError, ValueError):
    """Invalid user-supplied parameters."""


class OddFactorCountError(ConfigError):
    pass


class SpacingError(ConfigError):
    pass


class HurstRangeError(ConfigError):
    pass


class NumericalError(LiftedHestonError, ArithmeticError):
    """A numerical routine failed to produce a trustworthy answer."""


class QuadratureError(NumericalError):
    def __init__(self, message, error_estimate):
        super().__init__(f"{message} (achieved error estimate {error_estimate:.3e})")
        self.error_estimate = error_estimate


class DegenerateMinimumError(NumericalError):
    pass


class MomentExplosionError(NumericalError):
    """Riccati solution blew up (|aggregate| beyond the explosion threshold)."""

    def __init__(self, message, u=None, step=None):
        super().__init__(message)
        self.u = u
        self.step = step


class BranchTrackingError(NumericalError):
    pass


class ArbitrageBoundError(NumericalError, ValueError):
    """Price outside the no-arbitrage bounds of a call."""

    def __init__(self, message, bound):
        super().__init__(message)
        self.bound = bound


class TruncationError(NumericalError):
    pass
