"""Exception types shared across the package."""


class CoopFuseError(Exception):
    pass


class AngleNearPi(CoopFuseError, ValueError):
    """Rotation angle too close to pi for a unique logarithm."""


class TauOutOfRange(CoopFuseError, ValueError):
    pass


class NotPositiveDefinite(CoopFuseError, ValueError):
    pass


class NotPSD(CoopFuseError, ValueError):
    pass


class NonPositiveDt(CoopFuseError, ValueError):
    pass


class OutOfOrderStamp(CoopFuseError, ValueError):
    pass


class NoBracketingVariables(CoopFuseError, LookupError):
    """Detection stamp not (yet) enclosed by two variables of a robot."""


class SingularSystem(CoopFuseError, RuntimeError):
    def __init__(self, message, label=None):
        super().__init__(message)
        self.label = label


class DegenerateSpread(CoopFuseError, ValueError):
    pass


class InsufficientOverlap(CoopFuseError, ValueError):
    pass


class ZeroVariance(CoopFuseError, ValueError):
    pass


class ConfigError(CoopFuseError, ValueError):
    pass


class DataError(CoopFuseError, ValueError):
    pass
