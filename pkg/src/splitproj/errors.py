"""Exception hierarchy shared by every module of the package."""


class SplitError(Exception):
    """Base class for all package errors."""


class InvalidArgument(SplitError, ValueError):
    pass


class DegenerateInput(SplitError, ValueError):
    """Input is numerically rank deficient."""


class ContractViolation(SplitError, RuntimeError):
    """A caller broke an API contract (e.g. reused a stale tape)."""


class ProtocolError(SplitError):
    pass


class ProtocolOrderError(ProtocolError):
    """A protocol operation was invoked in the wrong phase."""


# transport
class FrameError(SplitError):
    pass


class CorruptFrame(FrameError):
    pass


class IncompleteFrame(FrameError):
    pass


class UnsupportedVersion(FrameError):
    pass


class Disconnected(SplitError, ConnectionError):
    pass


class TimedOut(SplitError, TimeoutError):
    pass


# data
class FormatError(SplitError, ValueError):
    pass


class InconsistentPair(SplitError, ValueError):
    pass


class PartitionFailure(SplitError):
    pass


class ConfigError(SplitError, ValueError):
    pass
