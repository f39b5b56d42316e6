"""Exception hierarchy shared by every module.

CLI exit codes are derived from the class: configuration problems exit 1,
data/format problems exit 2, numerical failures exit 3.
"""


class PoseError(Exception):
    exit_code = 1


class ConfigError(PoseError, ValueError):
    exit_code = 1


class ShapeError(PoseError, ValueError):
    exit_code = 2


class TemporalExtentError(ShapeError):
    """Raised when a sequence is shorter than the receptive field of an op."""


class DegenerateBatchError(PoseError, ValueError):
    exit_code = 3


class BehindCameraError(PoseError, ValueError):
    exit_code = 2

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class DataFormatError(PoseError):
    exit_code = 2


class CheckpointError(DataFormatError):
    pass


class NonFiniteError(PoseError, FloatingPointError):
    exit_code = 3
