"""Exception types shared across the package."""


class ScunwarpError(Exception):
    """Base class for all package errors."""


class DegeneratePoint(ScunwarpError, ValueError):
    """Projective denominator vanished at the requested point."""


class SingularMatrix(ScunwarpError, ValueError):
    pass


class DegenerateConfig(ScunwarpError, ValueError):
    pass


class UnsupportedDegree(ScunwarpError, ValueError):
    pass


class DimensionMismatch(ScunwarpError, ValueError):
    pass


class NoGraph(ScunwarpError, RuntimeError):
    pass


class NonFiniteLoss(ScunwarpError, FloatingPointError):
    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state or {}


class OutOfRegion(ScunwarpError, ValueError):
    pass


class OutOfCell(ScunwarpError, ValueError):
    pass


class EmptyMask(ScunwarpError, ValueError):
    pass


class EmptyDataset(ScunwarpError, ValueError):
    pass


class CheckpointError(ScunwarpError, ValueError):
    """Unreadable checkpoint, bad magic or unsupported version."""


class ConfigError(ScunwarpError, ValueError):
    def __init__(self, message, keys=()):
        super().__init__(message)
        self.keys = list(keys)
