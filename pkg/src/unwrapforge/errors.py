"""Exception hierarchy shared across unwrapforge.

Every error carries an ``exit_code`` so the CLI can map failures to the
documented process exit status without inspecting messages.
"""


class UnwrapForgeError(Exception):
    exit_code = 1


class ConfigError(UnwrapForgeError, ValueError):
    exit_code = 2


class DataError(UnwrapForgeError, ValueError):
    exit_code = 3


class NumericError(UnwrapForgeError, ArithmeticError):
    exit_code = 4


class StageError(UnwrapForgeError):
    exit_code = 5

    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


# grid file errors; ``code`` distinguishes them in tooling and tests
class GridFormatError(DataError):
    code = "format"


class BadMagicError(GridFormatError):
    code = "bad-magic"


class TruncatedFileError(GridFormatError):
    code = "truncated"


class VersionMismatchError(GridFormatError):
    code = "version"


class DimensionOverflowError(GridFormatError):
    code = "dimension-overflow"
