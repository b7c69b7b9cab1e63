"""Exception hierarchy.

Each exception carries the CLI exit code it maps to, so the command layer
can translate failures without a lookup table.
"""


class UncGateError(Exception):
    exit_code = 1


class ConfigError(UncGateError, ValueError):
    exit_code = 2


class InvalidSpec(ConfigError):
    pass


class InvalidValue(UncGateError, ValueError):
    exit_code = 2


class InvalidTemperature(InvalidValue):
    pass


class ShapeMismatch(UncGateError, ValueError):
    exit_code = 4


class HorizonMismatch(ShapeMismatch):
    pass


class EmptyMap(UncGateError, ValueError):
    exit_code = 4


class EmptyInput(UncGateError, ValueError):
    exit_code = 4


class DegenerateTrajectory(UncGateError, ValueError):
    exit_code = 4


class WindowMismatch(UncGateError, ValueError):
    exit_code = 4


class NonFiniteLoss(UncGateError, FloatingPointError):
    exit_code = 4

    def __init__(self, message, batch_index=None):
        super().__init__(message)
        self.batch_index = batch_index


class GraphCycle(UncGateError, RuntimeError):
    exit_code = 4


class MissingUpstream(UncGateError, FileNotFoundError):
    exit_code = 3


class MissingCheckpoint(MissingUpstream):
    pass


class IoFailure(UncGateError, OSError):
    exit_code = 3
