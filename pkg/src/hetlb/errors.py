"""Exception hierarchy shared by all modules."""


class HetlbError(Exception):
    """Base class for every error raised by this package."""


class SpecError(HetlbError, ValueError):
    pass


class NonIntegerPoolSize(SpecError):
    pass


class UnnormalizedCapacity(SpecError):
    pass


class UnsortedSpeeds(SpecError):
    pass


class LambdaOutOfRange(SpecError):
    pass


class StateError(HetlbError, ValueError):
    pass


class DepthExceeded(StateError):
    pass


class PoolCountMismatch(StateError):
    pass


class DOutOfRange(HetlbError, ValueError):
    pass


class NoIdleServer(HetlbError):
    pass


class InitialOrderViolated(HetlbError, ValueError):
    pass


class NegativeRateGap(HetlbError, ArithmeticError):
    pass


class BernoulliOutOfRange(HetlbError, ArithmeticError):
    pass


class StepTooLarge(HetlbError, ArithmeticError):
    pass


class TruncationTooSmall(HetlbError):
    pass


class ThetaOutOfRange(HetlbError, ValueError):
    pass


class EmptySample(HetlbError, ValueError):
    pass


class ConfigError(HetlbError, ValueError):
    pass


class UnknownKey(ConfigError):
    pass


class TypeMismatch(ConfigError):
    pass


class MissingRequired(ConfigError):
    pass
