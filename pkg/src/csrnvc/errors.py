"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class CsrnvcError(Exception):
    exit_code = 1


class UsageError(CsrnvcError):
    exit_code = 2


class ConfigError(CsrnvcError):
    exit_code = 3


class FormatError(CsrnvcError):
    """Malformed or unsupported file contents."""

    exit_code = 4


class ParseError(FormatError):
    def __init__(self, path, line_no, message):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{self.path}:{line_no}: {message}")


class AlignmentError(CsrnvcError):
    exit_code = 4


class NumericError(CsrnvcError):
    exit_code = 5


class DimensionError(NumericError, ValueError):
    pass


class DegenerateStatsError(NumericError):
    pass


class InsufficientVoicingError(NumericError):
    pass
