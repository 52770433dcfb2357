"""Exception types shared by every module.

Each class carries an ``exit_code`` so the command line front end can map a
raised error to a distinct process status.
"""


class BHFlowError(Exception):
    exit_code = 1


class ArgumentError(BHFlowError, ValueError):
    exit_code = 2


class FormatError(BHFlowError):
    exit_code = 3


class TruncationError(FormatError):
    exit_code = 4


class DataError(BHFlowError, ValueError):
    exit_code = 5


class DegenerateInputError(BHFlowError, ValueError):
    exit_code = 6


class DivergenceError(BHFlowError, FloatingPointError):
    exit_code = 7

    def __init__(self, step, message=None):
        self.step = int(step)
        super().__init__(message or f"rollout diverged at step {self.step}")


class IoError(BHFlowError, OSError):
    exit_code = 8


EXIT_CODES = {
    cls.__name__: cls.exit_code
    for cls in (
        BHFlowError,
        ArgumentError,
        FormatError,
        TruncationError,
        DataError,
        DegenerateInputError,
        DivergenceError,
        IoError,
    )
}
